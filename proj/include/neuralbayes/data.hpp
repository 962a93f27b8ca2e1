#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "neuralbayes/tensor.hpp"

namespace nb {

/// Labeled point cloud. `points` is [N x n]; image data keeps its per-sample
/// shape in `sample_shape` (e.g. {1, 28, 28}) while staying flat here.
struct ManifoldDataset {
    Tensor points;
    std::vector<int> components;
    Tensor mean;  // empty until standardized
    Tensor std;
    std::uint64_t seed = 0;
    Shape sample_shape;

    // Set by lift_and_rotate.
    std::size_t base_dim = 0;
    std::size_t lift_dim = 0;
    std::uint64_t lift_seed = 0;

    std::size_t size() const { return points.rank() == 2 ? points.rows() : 0; }
    std::size_t dim() const { return points.rank() == 2 ? points.cols() : 0; }
    int num_components() const;
    bool standardized() const { return mean.size() > 0 && mean.rank() == 1; }
};

/// Two interleaved half circles. The lower moon is the upper one reflected and
/// moved right by 1 and down by `gap`.
ManifoldDataset make_two_moons(std::size_t n_per, double gap, double noise, std::uint64_t seed);
/// Concentric circles, one component per radius.
ManifoldDataset make_circles(std::size_t n_per, const std::vector<double>& radii, double noise,
                             std::uint64_t seed);
/// Isotropic Gaussian blobs. Empty `centers` places K centers evenly on a circle of radius 5.
ManifoldDataset make_blobs(std::size_t k, std::size_t n_per, const std::vector<std::vector<double>>& centers,
                           double noise, std::uint64_t seed);

/// Smallest Euclidean distance between points of different components.
double min_intercomponent_distance(const ManifoldDataset& ds);

/// Zero-pads to `dim` columns and applies a seeded random rotation.
ManifoldDataset lift_and_rotate(const ManifoldDataset& ds, std::size_t dim, std::uint64_t seed);
/// Maps base-space points [M x base_dim] through the stored lift of `ds`.
Tensor apply_lift(const ManifoldDataset& ds, const Tensor& base_points);

struct Standardizer {
    Tensor mean;
    Tensor std;  // floored at 1e-8
};

Standardizer fit_standardizer(const Tensor& points);
Tensor apply_standardizer(const Standardizer& s, const Tensor& points);
/// Fits on `ds` itself and stores the statistics.
ManifoldDataset standardize(const ManifoldDataset& ds);
/// Applies statistics fitted elsewhere (e.g. on a training split).
ManifoldDataset standardize_with(const ManifoldDataset& ds, const Standardizer& s);

/// Pixels scaled to [0,1].
ManifoldDataset load_idx(const std::string& images_path, const std::string& labels_path);
/// Pixels stored as round(255 v); loading back is bit-exact for k/255 values.
void write_idx(const std::string& images_path, const std::string& labels_path, const ManifoldDataset& ds);

ManifoldDataset subset(const ManifoldDataset& ds, const std::vector<std::size_t>& indices);
/// Seeded shuffled partition. Part boundaries are round(cumulative fraction * N).
std::vector<ManifoldDataset> split(const ManifoldDataset& ds, const std::vector<double>& fractions,
                                   std::uint64_t seed);
std::vector<std::vector<std::size_t>> split_indices(std::size_t n, const std::vector<double>& fractions,
                                                    std::uint64_t seed);

/// Header x0,...,x{n-1},component; values printed with 17 significant digits.
void write_csv(const std::string& path, const ManifoldDataset& ds);
ManifoldDataset read_csv(const std::string& path);

}  // namespace nb
