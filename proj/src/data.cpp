#include "neuralbayes/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "neuralbayes/errors.hpp"
#include "neuralbayes/nn.hpp"
#include "neuralbayes/random.hpp"

namespace nb {

int ManifoldDataset::num_components() const {
    if (components.empty()) return 0;
    return *std::max_element(components.begin(), components.end()) + 1;
}

namespace {

void check_noise(double noise) {
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw ArgumentError("noise must be a finite nonnegative number");
}

void check_disjoint(const ManifoldDataset& ds, double noise) {
    const double d = min_intercomponent_distance(ds);
    if (!(d > 4.0 * noise)) {
        std::ostringstream os;
        os << "components are not disjoint: min distance " << d << " <= 4 * noise (" << 4.0 * noise
           << "); lower the noise";
        throw GenerationError(os.str());
    }
}

ManifoldDataset from_rows(const std::vector<double>& xs, std::vector<int> comps, std::size_t dim,
                          std::uint64_t seed) {
    ManifoldDataset ds;
    ds.points = Tensor(Shape{comps.size(), dim}, xs);
    ds.components = std::move(comps);
    ds.seed = seed;
    ds.sample_shape = Shape{dim};
    return ds;
}

}  // namespace

ManifoldDataset make_two_moons(std::size_t n_per, double gap, double noise, std::uint64_t seed) {
    if (n_per == 0) throw ArgumentError("n_per must be positive");
    check_noise(noise);
    Rng rng(seed);
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    std::normal_distribution<double> jitter(0.0, noise > 0.0 ? noise : 1.0);
    std::vector<double> xs;
    std::vector<int> comps;
    for (int c = 0; c < 2; ++c) {
        for (std::size_t i = 0; i < n_per; ++i) {
            const double t = angle(rng);
            double x = std::cos(t), y = std::sin(t);
            if (c == 1) {
                x = 1.0 - x;
                y = -y + (1.0 - gap);
            }
            if (noise > 0.0) {
                x += jitter(rng);
                y += jitter(rng);
            }
            xs.insert(xs.end(), {x, y});
            comps.push_back(c);
        }
    }
    auto ds = from_rows(xs, std::move(comps), 2, seed);
    check_disjoint(ds, noise);
    return ds;
}

ManifoldDataset make_circles(std::size_t n_per, const std::vector<double>& radii, double noise,
                             std::uint64_t seed) {
    if (n_per == 0) throw ArgumentError("n_per must be positive");
    if (radii.size() < 2) throw ArgumentError("need at least two radii");
    check_noise(noise);
    Rng rng(seed);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> jitter(0.0, noise > 0.0 ? noise : 1.0);
    std::vector<double> xs;
    std::vector<int> comps;
    for (std::size_t c = 0; c < radii.size(); ++c) {
        if (!(radii[c] > 0.0)) throw ArgumentError("radii must be positive");
        for (std::size_t i = 0; i < n_per; ++i) {
            const double t = angle(rng);
            double x = radii[c] * std::cos(t), y = radii[c] * std::sin(t);
            if (noise > 0.0) {
                x += jitter(rng);
                y += jitter(rng);
            }
            xs.insert(xs.end(), {x, y});
            comps.push_back(static_cast<int>(c));
        }
    }
    auto ds = from_rows(xs, std::move(comps), 2, seed);
    check_disjoint(ds, noise);
    return ds;
}

ManifoldDataset make_blobs(std::size_t k, std::size_t n_per, const std::vector<std::vector<double>>& centers,
                           double noise, std::uint64_t seed) {
    if (n_per == 0) throw ArgumentError("n_per must be positive");
    if (k < 2) throw ArgumentError("need at least two blobs");
    check_noise(noise);
    std::vector<std::vector<double>> c = centers;
    if (c.empty()) {
        for (std::size_t j = 0; j < k; ++j) {
            const double t = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(k);
            c.push_back({5.0 * std::cos(t), 5.0 * std::sin(t)});
        }
    }
    if (c.size() != k) throw ArgumentError("number of centers differs from K");
    const std::size_t dim = c.front().size();
    if (dim == 0) throw ArgumentError("centers must have at least one coordinate");
    for (const auto& ci : c) {
        if (ci.size() != dim) throw ArgumentError("centers differ in dimension");
    }
    Rng rng(seed);
    std::normal_distribution<double> jitter(0.0, noise > 0.0 ? noise : 1.0);
    std::vector<double> xs;
    std::vector<int> comps;
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < n_per; ++i) {
            for (std::size_t d = 0; d < dim; ++d) xs.push_back(c[j][d] + (noise > 0.0 ? jitter(rng) : 0.0));
            comps.push_back(static_cast<int>(j));
        }
    }
    auto ds = from_rows(xs, std::move(comps), dim, seed);
    check_disjoint(ds, noise);
    return ds;
}

double min_intercomponent_distance(const ManifoldDataset& ds) {
    const std::size_t n = ds.size(), d = ds.dim();
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        const double* a = ds.points.data() + i * d;
        for (std::size_t j = i + 1; j < n; ++j) {
            if (ds.components[i] == ds.components[j]) continue;
            const double* b = ds.points.data() + j * d;
            double s = 0.0;
            for (std::size_t t = 0; t < d; ++t) s += (a[t] - b[t]) * (a[t] - b[t]);
            best = std::min(best, s);
        }
    }
    return std::sqrt(best);
}

ManifoldDataset lift_and_rotate(const ManifoldDataset& ds, std::size_t dim, std::uint64_t seed) {
    if (dim < ds.dim()) throw ArgumentError("lift dimension smaller than the data dimension");
    ManifoldDataset out = ds;
    out.base_dim = ds.dim();
    out.lift_dim = dim;
    out.lift_seed = seed;
    out.points = apply_lift(out, ds.points);
    out.sample_shape = Shape{dim};
    out.mean = Tensor();
    out.std = Tensor();
    return out;
}

Tensor apply_lift(const ManifoldDataset& ds, const Tensor& base_points) {
    if (ds.lift_dim == 0) throw ArgumentError("dataset carries no lift");
    if (base_points.rank() != 2 || base_points.cols() != ds.base_dim) {
        throw DimensionError("points must be [M x " + std::to_string(ds.base_dim) + "]");
    }
    const Tensor r = orthogonal_init(ds.lift_dim, ds.lift_dim, ds.lift_seed);
    const std::size_t m = base_points.rows(), n = ds.base_dim, dim = ds.lift_dim;
    // Padding coordinates are zero, so only the first n columns of R contribute.
    Tensor out(Shape{m, dim});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t a = 0; a < dim; ++a) {
            double s = 0.0;
            for (std::size_t b = 0; b < n; ++b) s += r.at(a, b) * base_points.at(i, b);
            out.at(i, a) = s;
        }
    }
    return out;
}

Standardizer fit_standardizer(const Tensor& points) {
    if (points.rank() != 2 || points.rows() < 2) throw ArgumentError("standardize needs at least two samples");
    const std::size_t n = points.rows(), d = points.cols();
    Standardizer s{Tensor(Shape{d}), Tensor(Shape{d})};
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) s.mean[j] += points.at(i, j);
    }
    for (std::size_t j = 0; j < d; ++j) s.mean[j] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double c = points.at(i, j) - s.mean[j];
            s.std[j] += c * c;
        }
    }
    for (std::size_t j = 0; j < d; ++j) s.std[j] = std::max(std::sqrt(s.std[j] / static_cast<double>(n)), 1e-8);
    return s;
}

Tensor apply_standardizer(const Standardizer& s, const Tensor& points) {
    if (points.rank() != 2 || points.cols() != s.mean.size()) throw DimensionError("standardizer dimension mismatch");
    Tensor out = points;
    const std::size_t d = points.cols();
    for (std::size_t i = 0; i < points.rows(); ++i) {
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = (points.at(i, j) - s.mean[j]) / s.std[j];
    }
    return out;
}

ManifoldDataset standardize(const ManifoldDataset& ds) {
    return standardize_with(ds, fit_standardizer(ds.points));
}

ManifoldDataset standardize_with(const ManifoldDataset& ds, const Standardizer& s) {
    ManifoldDataset out = ds;
    out.points = apply_standardizer(s, ds.points);
    out.mean = s.mean;
    out.std = s.std;
    return out;
}

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& buf, std::size_t offset, const std::string& path) {
    if (buf.size() < offset + 4) {
        throw FormatError(path + ": truncated header at byte " + std::to_string(offset) + " (file has " +
                          std::to_string(buf.size()) + " bytes)");
    }
    return (std::uint32_t(buf[offset]) << 24) | (std::uint32_t(buf[offset + 1]) << 16) |
           (std::uint32_t(buf[offset + 2]) << 8) | std::uint32_t(buf[offset + 3]);
}

void put_be32(std::ostream& out, std::uint32_t v) {
    const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
    out.write(b, 4);
}

std::string hex(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

}  // namespace

ManifoldDataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const auto img = read_file(images_path);
    const auto lab = read_file(labels_path);
    const std::uint32_t im_magic = be32(img, 0, images_path);
    if (im_magic != 0x803) {
        throw FormatError(images_path + ": bad magic " + hex(im_magic) + " at byte 0, expected 0x00000803");
    }
    const std::uint32_t lb_magic = be32(lab, 0, labels_path);
    if (lb_magic != 0x801) {
        throw FormatError(labels_path + ": bad magic " + hex(lb_magic) + " at byte 0, expected 0x00000801");
    }
    const std::size_t n = be32(img, 4, images_path), rows = be32(img, 8, images_path), cols = be32(img, 12, images_path);
    const std::size_t nl = be32(lab, 4, labels_path);
    if (n != nl) {
        throw FormatError("image count " + std::to_string(n) + " (byte 4 of " + images_path + ") differs from label count " +
                          std::to_string(nl) + " (byte 4 of " + labels_path + ")");
    }
    if (n == 0 || rows == 0 || cols == 0) throw FormatError(images_path + ": empty image set");
    const std::size_t px = rows * cols;
    if (img.size() != 16 + n * px) {
        throw FormatError(images_path + ": expected " + std::to_string(16 + n * px) + " bytes, found " +
                          std::to_string(img.size()) + " (data ends at byte " + std::to_string(img.size()) + ")");
    }
    if (lab.size() != 8 + n) {
        throw FormatError(labels_path + ": expected " + std::to_string(8 + n) + " bytes, found " +
                          std::to_string(lab.size()));
    }
    ManifoldDataset ds;
    ds.points = Tensor(Shape{n, px});
    for (std::size_t i = 0; i < n * px; ++i) ds.points[i] = static_cast<double>(img[16 + i]) / 255.0;
    ds.components.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.components[i] = lab[8 + i];
    ds.sample_shape = Shape{1, rows, cols};
    return ds;
}

void write_idx(const std::string& images_path, const std::string& labels_path, const ManifoldDataset& ds) {
    if (ds.sample_shape.size() != 3 || ds.sample_shape[0] != 1) {
        throw ArgumentError("write_idx needs single-channel image data");
    }
    const std::size_t n = ds.size(), rows = ds.sample_shape[1], cols = ds.sample_shape[2];
    std::ofstream im(images_path, std::ios::binary), lb(labels_path, std::ios::binary);
    if (!im || !lb) throw FormatError("cannot write IDX files");
    put_be32(im, 0x803);
    put_be32(im, static_cast<std::uint32_t>(n));
    put_be32(im, static_cast<std::uint32_t>(rows));
    put_be32(im, static_cast<std::uint32_t>(cols));
    for (double v : ds.points.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError("pixel outside [0,1]");
        im.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
    put_be32(lb, 0x801);
    put_be32(lb, static_cast<std::uint32_t>(n));
    for (int c : ds.components) {
        if (c < 0 || c > 255) throw DomainError("label outside a byte");
        lb.put(static_cast<char>(c));
    }
}

ManifoldDataset subset(const ManifoldDataset& ds, const std::vector<std::size_t>& indices) {
    ManifoldDataset out = ds;
    const std::size_t d = ds.dim();
    if (indices.empty()) throw ArgumentError("empty subset");
    out.points = Tensor(Shape{indices.size(), d});
    out.components.resize(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const std::size_t i = indices[r];
        if (i >= ds.size()) throw ArgumentError("subset index out of range");
        std::copy_n(ds.points.data() + i * d, d, out.points.data() + r * d);
        out.components[r] = ds.components[i];
    }
    return out;
}

std::vector<std::vector<std::size_t>> split_indices(std::size_t n, const std::vector<double>& fractions,
                                                    std::uint64_t seed) {
    if (fractions.empty()) throw ArgumentError("no split fractions");
    double total = 0.0;
    for (double f : fractions) {
        if (!(f > 0.0)) throw ArgumentError("split fractions must be positive");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ArgumentError("split fractions must sum to 1");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(perm[i - 1], perm[pick(rng)]);
    }
    std::vector<std::vector<std::size_t>> parts;
    double cum = 0.0;
    std::size_t begin = 0;
    for (std::size_t p = 0; p < fractions.size(); ++p) {
        cum += fractions[p];
        const std::size_t end = p + 1 == fractions.size() ? n : static_cast<std::size_t>(std::llround(cum * n));
        parts.emplace_back(perm.begin() + begin, perm.begin() + std::max(begin, end));
        begin = std::max(begin, end);
    }
    return parts;
}

std::vector<ManifoldDataset> split(const ManifoldDataset& ds, const std::vector<double>& fractions,
                                   std::uint64_t seed) {
    std::vector<ManifoldDataset> out;
    for (const auto& idx : split_indices(ds.size(), fractions, seed)) {
        if (idx.empty()) throw ArgumentError("split produced an empty part");
        out.push_back(subset(ds, idx));
    }
    return out;
}

void write_csv(const std::string& path, const ManifoldDataset& ds) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw FormatError("cannot write " + path);
    const std::size_t d = ds.dim();
    for (std::size_t j = 0; j < d; ++j) std::fprintf(f, "x%zu,", j);
    std::fprintf(f, "component\n");
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < d; ++j) std::fprintf(f, "%.17g,", ds.points.at(i, j));
        std::fprintf(f, "%d\n", ds.components[i]);
    }
    std::fclose(f);
}

ManifoldDataset read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path + ": empty file");
    std::size_t d = 0;
    {
        std::stringstream hs(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(hs, cell, ',')) cells.push_back(cell);
        if (cells.empty() || cells.back() != "component") throw FormatError(path + ": header must end with 'component'");
        d = cells.size() - 1;
        for (std::size_t j = 0; j < d; ++j) {
            if (cells[j] != "x" + std::to_string(j)) throw FormatError(path + ": bad header column " + cells[j]);
        }
    }
    if (d == 0) throw FormatError(path + ": no coordinate columns");
    std::vector<double> xs;
    std::vector<int> comps;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ls(line);
        std::string cell;
        std::size_t col = 0;
        while (std::getline(ls, cell, ',')) {
            try {
                std::size_t used = 0;
                if (col < d) {
                    xs.push_back(std::stod(cell, &used));
                } else if (col == d) {
                    comps.push_back(std::stoi(cell, &used));
                }
                if (used != cell.size()) throw std::invalid_argument(cell);
            } catch (const std::exception&) {
                throw FormatError(path + ": line " + std::to_string(lineno) + " has a bad value '" + cell + "'");
            }
            ++col;
        }
        if (col != d + 1) throw FormatError(path + ": line " + std::to_string(lineno) + " has " + std::to_string(col) + " cells");
    }
    if (comps.empty()) throw FormatError(path + ": no rows");
    ManifoldDataset ds;
    ds.points = Tensor::from(Shape{comps.size(), d}, std::move(xs));
    ds.components = std::move(comps);
    ds.sample_shape = Shape{d};
    return ds;
}

}  // namespace nb
