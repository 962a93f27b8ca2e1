#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "neuralbayes/data.hpp"
#include "neuralbayes/errors.hpp"
#include "neuralbayes/nn.hpp"
#include "neuralbayes/random.hpp"

using namespace nb;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::path(testing::TempDir()) / "nb_data_tests";
    fs::create_directories(dir);
    return dir / name;
}

void put_be32(std::ofstream& f, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

void write_zero_idx(const fs::path& images, const fs::path& labels, std::uint32_t n, std::uint32_t rows,
                    std::uint32_t cols) {
    std::ofstream im(images, std::ios::binary), lb(labels, std::ios::binary);
    put_be32(im, 0x803);
    put_be32(im, n);
    put_be32(im, rows);
    put_be32(im, cols);
    im.write(std::string(n * rows * cols, '\0').data(), n * rows * cols);
    put_be32(lb, 0x801);
    put_be32(lb, n);
    lb.write(std::string(n, '\0').data(), n);
}

double dist(const Tensor& p, std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t t = 0; t < p.cols(); ++t) s += (p.at(i, t) - p.at(j, t)) * (p.at(i, t) - p.at(j, t));
    return std::sqrt(s);
}

}  // namespace

TEST(Generators, BlobsAreSeparatedAndSeeded) {
    const ManifoldDataset a = make_blobs(2, 100, {{5, 0}, {-5, 0}}, 0.1, 11);
    EXPECT_EQ(a.size(), 200u);
    EXPECT_EQ(a.num_components(), 2);
    EXPECT_GT(min_intercomponent_distance(a), 4.0);
    const ManifoldDataset b = make_blobs(2, 100, {{5, 0}, {-5, 0}}, 0.1, 11);
    EXPECT_EQ(a.points, b.points);
    EXPECT_EQ(a.components, b.components);
    const ManifoldDataset c = make_blobs(2, 100, {{5, 0}, {-5, 0}}, 0.1, 12);
    EXPECT_NE(a.points, c.points);
}

TEST(Generators, RejectBadArguments) {
    EXPECT_THROW(make_blobs(2, 0, {}, 0.1, 1), ArgumentError);
    EXPECT_THROW(make_two_moons(0, 0.5, 0.1, 1), ArgumentError);
    EXPECT_THROW(make_circles(10, {1.0}, 0.1, 1), ArgumentError);
    EXPECT_THROW(make_two_moons(10, 0.5, -1.0, 1), ArgumentError);
    EXPECT_THROW(make_blobs(3, 10, {{0, 0}, {1, 1}}, 0.1, 1), ArgumentError);
}

TEST(Generators, OverlappingComponentsRejected) {
    EXPECT_THROW(make_blobs(2, 50, {{0.1, 0}, {-0.1, 0}}, 1.0, 3), GenerationError);
}

TEST(Generators, MoonsAndCirclesAreDisjoint) {
    const ManifoldDataset m = make_two_moons(500, 0.5, 0.05, 4);
    EXPECT_EQ(m.size(), 1000u);
    EXPECT_GT(min_intercomponent_distance(m), 4.0 * 0.05);
    const ManifoldDataset c = make_circles(500, {1.0, 2.0}, 0.05, 4);
    EXPECT_EQ(c.num_components(), 2);
    EXPECT_GT(min_intercomponent_distance(c), 4.0 * 0.05);
}

TEST(Lift, PreservesDistances) {
    const ManifoldDataset base = make_two_moons(50, 0.5, 0.05, 5);
    const ManifoldDataset lifted = lift_and_rotate(base, 512, 6);
    ASSERT_EQ(lifted.dim(), 512u);
    EXPECT_EQ(lifted.base_dim, 2u);
    for (std::size_t i = 0; i < base.size(); i += 7) {
        for (std::size_t j = i + 1; j < base.size(); j += 5) {
            EXPECT_NEAR(dist(lifted.points, i, j), dist(base.points, i, j), 1e-9);
        }
    }
    EXPECT_EQ(lifted.components, base.components);
    EXPECT_EQ(apply_lift(lifted, base.points), lifted.points);
    EXPECT_THROW(lift_and_rotate(lifted, 100, 1), ArgumentError);
}

TEST(Lift, RotationIsOrthogonal) {
    const Tensor r = orthogonal_init(64, 64, 9);
    for (std::size_t a = 0; a < 64; ++a) {
        for (std::size_t b = 0; b < 64; ++b) {
            double s = 0.0;
            for (std::size_t t = 0; t < 64; ++t) s += r.at(t, a) * r.at(t, b);
            EXPECT_NEAR(s, a == b ? 1.0 : 0.0, 1e-12);
        }
    }
}

TEST(Standardize, ZeroMeanUnitStd) {
    const ManifoldDataset s = standardize(make_blobs(3, 200, {}, 0.5, 10));
    ASSERT_TRUE(s.standardized());
    for (std::size_t j = 0; j < s.dim(); ++j) {
        double m = 0.0, v = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) m += s.points.at(i, j) / s.size();
        for (std::size_t i = 0; i < s.size(); ++i) v += (s.points.at(i, j) - m) * (s.points.at(i, j) - m) / s.size();
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v, 1.0, 1e-12);
    }
    const ManifoldDataset twice = standardize(s);
    EXPECT_LE(max_abs_diff(twice.points, s.points), 1e-12);
}

TEST(Standardize, ConstantDimensionBecomesZero) {
    const Tensor pts = Tensor::matrix({{1.0, 4.0}, {2.0, 4.0}, {3.0, 4.0}});
    const Tensor out = apply_standardizer(fit_standardizer(pts), pts);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out.at(i, 1), 0.0);
    EXPECT_THROW(fit_standardizer(Tensor::matrix({{1.0}})), ArgumentError);
}

TEST(Idx, AllZeroFixture) {
    const fs::path im = scratch("zero-images"), lb = scratch("zero-labels");
    write_zero_idx(im, lb, 3, 4, 5);
    const ManifoldDataset ds = load_idx(im.string(), lb.string());
    EXPECT_EQ(ds.size(), 3u);
    EXPECT_EQ(ds.dim(), 20u);
    EXPECT_EQ(ds.sample_shape, (Shape{1, 4, 5}));
    for (double v : ds.points.values()) EXPECT_EQ(v, 0.0);
    for (int c : ds.components) EXPECT_EQ(c, 0);
}

TEST(Idx, TruncatedAndBadMagicRejected) {
    const fs::path im = scratch("t-images"), lb = scratch("t-labels");
    write_zero_idx(im, lb, 3, 4, 5);
    fs::resize_file(im, 16 + 3 * 20 - 1);
    EXPECT_THROW(load_idx(im.string(), lb.string()), FormatError);
    fs::resize_file(im, 10);
    EXPECT_THROW(load_idx(im.string(), lb.string()), FormatError);
    write_zero_idx(im, lb, 3, 4, 5);
    try {
        load_idx(lb.string(), lb.string());
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos) << e.what();
    }
    EXPECT_THROW(load_idx(scratch("missing").string(), lb.string()), FormatError);
}

TEST(Idx, RoundTripIsBitExact) {
    Rng rng(12);
    ManifoldDataset ds;
    ds.points = Tensor(Shape{6, 12});
    for (double& v : ds.points.values()) v = static_cast<double>(rng() % 256) / 255.0;
    ds.components = {0, 1, 2, 9, 4, 5};
    ds.sample_shape = Shape{1, 3, 4};
    const fs::path im = scratch("rt-images"), lb = scratch("rt-labels");
    write_idx(im.string(), lb.string(), ds);
    const ManifoldDataset back = load_idx(im.string(), lb.string());
    EXPECT_EQ(back.points, ds.points);
    EXPECT_EQ(back.components, ds.components);
    EXPECT_EQ(back.sample_shape, ds.sample_shape);
}

TEST(Split, SizesUnionAndDeterminism) {
    const auto parts = split_indices(100, {0.9, 0.1}, 13);
    ASSERT_EQ(parts.size(), 2u);
    EXPECT_EQ(parts[0].size(), 90u);
    EXPECT_EQ(parts[1].size(), 10u);
    std::set<std::size_t> all(parts[0].begin(), parts[0].end());
    all.insert(parts[1].begin(), parts[1].end());
    EXPECT_EQ(all.size(), 100u);
    EXPECT_EQ(*all.rbegin(), 99u);
    EXPECT_EQ(split_indices(100, {0.9, 0.1}, 13), parts);
    EXPECT_NE(split_indices(100, {0.9, 0.1}, 14), parts);
}

TEST(Split, InvalidFractions) {
    EXPECT_THROW(split_indices(10, {}, 1), ArgumentError);
    EXPECT_THROW(split_indices(10, {0.5, 0.6}, 1), ArgumentError);
    EXPECT_THROW(split_indices(10, {1.2, -0.2}, 1), ArgumentError);
    const ManifoldDataset ds = make_blobs(2, 2, {}, 0.1, 1);
    EXPECT_THROW(split(ds, {0.99, 0.01}, 1), ArgumentError);
}

TEST(Split, PartsCarryMatchingLabels) {
    const ManifoldDataset ds = make_blobs(3, 30, {}, 0.1, 15);
    const auto idx = split_indices(ds.size(), {0.8, 0.2}, 16);
    const auto parts = split(ds, {0.8, 0.2}, 16);
    for (std::size_t p = 0; p < 2; ++p) {
        for (std::size_t i = 0; i < idx[p].size(); ++i) {
            EXPECT_EQ(parts[p].components[i], ds.components[idx[p][i]]);
            EXPECT_EQ(parts[p].points.at(i, 0), ds.points.at(idx[p][i], 0));
        }
    }
}

TEST(Csv, RoundTrip) {
    const ManifoldDataset ds = make_circles(20, {1.0, 3.0}, 0.1, 17);
    const fs::path path = scratch("circles.csv");
    write_csv(path.string(), ds);
    const ManifoldDataset back = read_csv(path.string());
    EXPECT_EQ(back.points, ds.points);
    EXPECT_EQ(back.components, ds.components);
}

TEST(Csv, MalformedRejected) {
    const fs::path path = scratch("bad.csv");
    {
        std::ofstream f(path);
        f << "x0,x1,component\n1.0,abc,0\n";
    }
    EXPECT_THROW(read_csv(path.string()), FormatError);
    {
        std::ofstream f(path);
        f << "x0,component\n1.0,0,7\n";
    }
    EXPECT_THROW(read_csv(path.string()), FormatError);
}
