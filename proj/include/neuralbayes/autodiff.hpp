#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "neuralbayes/tensor.hpp"

namespace nb {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

enum class Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Log,
    Exp,
    Relu,
    MatMul,
    Transpose,
    SoftmaxRows,
    MeanRows,
    MeanAll,
    SumAll,
    Column,
    Reshape,
    AvgPool2d,
    MaxPool2d,
    Conv2d,
    SpatialSlice,
    ChannelsLast,
    BatchNorm,
    SoftmaxCrossEntropy,
    StopGradient,
};

const char* op_name(Op op);

/// Gradient accumulators for the parents of one node during the reverse sweep.
class GradSink {
public:
    GradSink(std::span<std::optional<Tensor>* const> slots, std::span<const Shape* const> shapes,
             std::span<const bool> wanted)
        : slots_(slots), shapes_(shapes), wanted_(wanted) {}

    /// False when no leaf is reachable through parent i; kernels may skip it.
    bool wanted(std::size_t i) const { return wanted_[i]; }
    /// Adds g into the accumulator of parent i.
    void add(std::size_t i, Tensor g);
    /// Zero-initialized (on first use) accumulator of parent i for in-place kernels.
    Tensor& slot(std::size_t i);

private:
    std::span<std::optional<Tensor>* const> slots_;
    std::span<const Shape* const> shapes_;
    std::span<const bool> wanted_;
};

using BackwardFn = std::function<void(const Tape&, std::span<const std::size_t> parents,
                                      const Tensor& grad, GradSink& sink)>;

struct TapeNode {
    Op op = Op::Constant;
    std::vector<std::size_t> parents;
    Tensor output;
    bool stop_grad = false;
    std::string name;  // leaves only
    BackwardFn backward;
};

/// Parameter name -> gradient of identical shape.
using GradientMap = std::map<std::string, Tensor>;

/// Dynamic computation record. Nodes are appended in creation order, so parents
/// always precede children and the record is acyclic by construction.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable leaf. Requesting an existing name returns the same node, so a
    /// parameter used by several forward passes accumulates a single gradient.
    Var leaf(const std::string& name, Tensor value);
    Var constant(Tensor value);
    Var constant(double v) { return constant(Tensor::scalar(v)); }

    Var record(Op op, std::vector<std::size_t> parents, Tensor output, BackwardFn backward);

    const TapeNode& node(std::size_t id) const { return nodes_[id]; }
    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a scalar loss. Every leaf on the tape gets an entry; leaves
    /// the loss does not reach get zeros.
    GradientMap backward(Var loss) const;

private:
    friend class Var;
    std::deque<TapeNode> nodes_;  // stable addresses: Var::value() hands out references
    std::map<std::string, std::size_t> leaves_;
};

// Elementwise arithmetic. Broadcasting covers equal shapes, a scalar operand, and
// an operand whose shape equals the other's with the leading batch axis dropped.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
/// log(x + guard); throws DomainError if any x + guard <= 0.
Var log(Var x, double guard = 0.0);
Var exp(Var x);
Var relu(Var x);

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double b);
Var operator+(double a, Var b);
Var operator-(Var a, double b);
Var operator-(double a, Var b);
Var operator*(Var a, double b);
Var operator*(double a, Var b);
Var operator/(Var a, double b);
Var operator/(double a, Var b);

/// [B x m] * [m x k] -> [B x k]
Var matmul(Var a, Var b);
Var transpose(Var a);

/// Row-wise softmax of a rank-2 tensor, max-subtracted.
Var softmax_rows(Var x);
/// Mean over the leading (batch) axis: [B x ...] -> [...].
Var mean_rows(Var x);
Var mean_all(Var x);
Var sum_all(Var x);
/// Column k of a rank-2 tensor: [B x K] -> [B].
Var column(Var x, std::size_t k);
Var reshape(Var x, Shape shape);

/// Spatial average pooling of [B x C x H x W]. When H (or W) is smaller than the
/// kernel, the kernel shrinks to H (or W).
Var avg_pool2d(Var x, std::size_t kernel = 2, std::size_t stride = 2);
Var max_pool2d(Var x, std::size_t kernel = 2, std::size_t stride = 2);
/// x [B x C x H x W], weight [O x C x k x k], bias [O].
Var conv2d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding);
/// Channel vector at one spatial location: [B x C x H x W] -> [B x C].
Var spatial_slice(Var x, std::size_t h, std::size_t w);
/// [B x C x H x W] -> [B x H x W x C]
Var channels_last(Var x);

struct BatchNormOutput {
    Var out;
    Tensor batch_mean;
    Tensor batch_var;  // biased
};

/// Batch statistics normalization over every axis except the feature axis (axis 1).
/// The variance is floored at var_floor before the square root.
BatchNormOutput batch_norm_train(Var x, Var scale, Var shift, double var_floor);
Var batch_norm_eval(Var x, Var scale, Var shift, const Tensor& mean, const Tensor& var,
                    double var_floor);

/// Mean negative log-likelihood of integer labels under softmax(logits).
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

/// Forward identity; contributes nothing in the reverse sweep.
Var stop_gradient(Var x);

}  // namespace nb
