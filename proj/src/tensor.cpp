#include "neuralbayes/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "neuralbayes/errors.hpp"

namespace nb {

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void check_extents(const Shape& shape) {
    for (auto d : shape) {
        if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
}

}  // namespace

Tensor::Tensor() : values_(1, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    check_extents(shape_);
    values_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    check_extents(shape_);
    if (shape_size(shape_) != values_.size()) {
        throw DimensionError("shape " + shape_str(shape_) + " needs " +
                             std::to_string(shape_size(shape_)) + " values, got " +
                             std::to_string(values_.size()));
    }
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    if (!t.all_finite()) throw DomainError("tensor values must be finite");
    return t;
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
    return from(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> v;
    v.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("ragged matrix literal");
        v.insert(v.end(), row.begin(), row.end());
    }
    return from(Shape{r, c}, std::move(v));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[axis];
}

double Tensor::item() const {
    if (values_.size() != 1) throw ArgumentError("item() on non-scalar tensor " + shape_str(shape_));
    return values_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != values_.size()) {
        throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), values_);
}

bool Tensor::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw DimensionError("max_abs_diff: size mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace nb
