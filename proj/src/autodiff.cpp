#include "neuralbayes/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "neuralbayes/errors.hpp"

namespace nb {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

MapConstMat as_mat(const Tensor& t, std::size_t r, std::size_t c) {
    return MapConstMat(t.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MapMat as_mat(Tensor& t, std::size_t r, std::size_t c) {
    return MapMat(t.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void same_tape(Var a, Var b) {
    if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
        throw ArgumentError("operands must live on the same tape");
    }
}

void require_rank(const Var& x, std::size_t rank, const char* what) {
    if (x.value().rank() != rank) {
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                             ", got " + shape_str(x.shape()));
    }
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

enum class Bcast { Same, ScalarA, ScalarB, RowA, RowB };

bool drops_leading(const Shape& big, const Shape& small) {
    return big.size() == small.size() + 1 && std::equal(small.begin(), small.end(), big.begin() + 1);
}

Bcast classify(const Shape& a, const Shape& b) {
    if (a == b) return Bcast::Same;
    if (shape_size(b) == 1) return Bcast::ScalarB;
    if (shape_size(a) == 1) return Bcast::ScalarA;
    if (drops_leading(a, b)) return Bcast::RowB;
    if (drops_leading(b, a)) return Bcast::RowA;
    throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
}

struct Indexer {
    Bcast kind;
    std::size_t a_size;
    std::size_t b_size;

    std::size_t ia(std::size_t i) const {
        switch (kind) {
            case Bcast::ScalarA: return 0;
            case Bcast::RowA: return i % a_size;
            default: return i;
        }
    }
    std::size_t ib(std::size_t i) const {
        switch (kind) {
            case Bcast::ScalarB: return 0;
            case Bcast::RowB: return i % b_size;
            default: return i;
        }
    }
};

template <class F, class DA, class DB>
Var binary(Op op, Var a, Var b, F f, DA dfa, DB dfb) {
    same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const Bcast kind = classify(av.shape(), bv.shape());
    const bool a_big = kind == Bcast::Same || kind == Bcast::ScalarB || kind == Bcast::RowB;
    Tensor out(a_big ? av.shape() : bv.shape());
    const Indexer ix{kind, av.size(), bv.size()};
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[ix.ia(i)], bv[ix.ib(i)]);

    return a.tape().record(
        op, {a.id(), b.id()}, std::move(out),
        [ix, dfa, dfb](const Tape& tape, std::span<const std::size_t> parents, const Tensor& g,
                       GradSink& sink) {
            const Tensor& x = tape.node(parents[0]).output;
            const Tensor& y = tape.node(parents[1]).output;
            if (sink.wanted(0)) {
                Tensor& ga = sink.slot(0);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[ix.ia(i)] += g[i] * dfa(x[ix.ia(i)], y[ix.ib(i)]);
                }
            }
            if (sink.wanted(1)) {
                Tensor& gb = sink.slot(1);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gb[ix.ib(i)] += g[i] * dfb(x[ix.ia(i)], y[ix.ib(i)]);
                }
            }
        });
}

template <class F, class D>
Var unary(Op op, Var a, F f, D df) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    return a.tape().record(op, {a.id()}, std::move(out),
                           [df](const Tape& tape, std::span<const std::size_t> parents,
                                const Tensor& g, GradSink& sink) {
                               const Tensor& x = tape.node(parents[0]).output;
                               Tensor gx(x.shape());
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * df(x[i]);
                               sink.add(0, std::move(gx));
                           });
}

struct Dims4 {
    std::size_t b, c, h, w;
};

Dims4 dims4(const Var& x, const char* what) {
    require_rank(x, 4, what);
    const auto& s = x.shape();
    return {s[0], s[1], s[2], s[3]};
}

std::size_t pooled_extent(std::size_t n, std::size_t kernel, std::size_t stride) {
    return (n - kernel) / stride + 1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / GradSink / Tape
// ---------------------------------------------------------------------------

const Tensor& Var::value() const {
    if (!tape_) throw ArgumentError("use of an empty Var");
    return tape_->nodes_[id_].output;
}

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Constant: return "constant";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Neg: return "neg";
        case Op::Log: return "log";
        case Op::Exp: return "exp";
        case Op::Relu: return "relu";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::SoftmaxRows: return "softmax_rows";
        case Op::MeanRows: return "mean_rows";
        case Op::MeanAll: return "mean_all";
        case Op::SumAll: return "sum_all";
        case Op::Column: return "column";
        case Op::Reshape: return "reshape";
        case Op::AvgPool2d: return "avg_pool2d";
        case Op::MaxPool2d: return "max_pool2d";
        case Op::Conv2d: return "conv2d";
        case Op::SpatialSlice: return "spatial_slice";
        case Op::ChannelsLast: return "channels_last";
        case Op::BatchNorm: return "batch_norm";
        case Op::SoftmaxCrossEntropy: return "softmax_cross_entropy";
        case Op::StopGradient: return "stop_gradient";
    }
    return "?";
}

void GradSink::add(std::size_t i, Tensor g) {
    auto& slot = *slots_[i];
    if (!slot) {
        slot = std::move(g);
        return;
    }
    Tensor& acc = *slot;
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += g[j];
}

Tensor& GradSink::slot(std::size_t i) {
    auto& slot = *slots_[i];
    if (!slot) slot = Tensor(*shapes_[i]);
    return *slot;
}

Var Tape::leaf(const std::string& name, Tensor value) {
    if (auto it = leaves_.find(name); it != leaves_.end()) return Var(this, it->second);
    TapeNode n;
    n.op = Op::Leaf;
    n.output = std::move(value);
    n.name = name;
    nodes_.push_back(std::move(n));
    leaves_.emplace(name, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
    TapeNode n;
    n.op = Op::Constant;
    n.output = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Op op, std::vector<std::size_t> parents, Tensor output, BackwardFn backward) {
    TapeNode n;
    n.op = op;
    n.parents = std::move(parents);
    n.output = std::move(output);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

GradientMap Tape::backward(Var loss) const {
    if (!loss.valid() || &loss.tape() != this) throw ArgumentError("loss does not belong to this tape");
    if (!loss.value().is_scalar()) {
        throw ArgumentError("backward needs a scalar loss, got " + shape_str(loss.shape()));
    }

    // A node needs a gradient when some leaf is reachable through it.
    std::vector<bool> needs(nodes_.size(), false);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const auto& n = nodes_[i];
        if (n.op == Op::Leaf) {
            needs[i] = true;
        } else if (!n.stop_grad && n.backward) {
            needs[i] = std::any_of(n.parents.begin(), n.parents.end(),
                                   [&](std::size_t p) { return needs[p]; });
        }
    }

    std::vector<std::optional<Tensor>> grads(loss.id() + 1);
    grads[loss.id()] = Tensor(loss.shape(), 1.0);

    std::vector<std::optional<Tensor>*> slots;
    std::vector<const Shape*> shapes;
    std::unique_ptr<bool[]> wanted;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        const auto& n = nodes_[id];
        if (!grads[id] || !needs[id] || n.op == Op::Leaf) continue;
        const std::size_t np = n.parents.size();
        slots.assign(np, nullptr);
        shapes.assign(np, nullptr);
        wanted = std::make_unique<bool[]>(np);
        for (std::size_t k = 0; k < np; ++k) {
            slots[k] = &grads[n.parents[k]];
            shapes[k] = &nodes_[n.parents[k]].output.shape();
            wanted[k] = needs[n.parents[k]];
        }
        GradSink sink(slots, shapes, std::span<const bool>(wanted.get(), np));
        n.backward(*this, n.parents, *grads[id], sink);
        if (id != loss.id()) grads[id].reset();
    }

    GradientMap out;
    for (const auto& [name, id] : leaves_) {
        if (id < grads.size() && grads[id]) {
            out.emplace(name, std::move(*grads[id]));
        } else {
            out.emplace(name, Tensor(nodes_[id].output.shape()));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
    return binary(
        Op::Add, a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
    return binary(
        Op::Sub, a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
    return binary(
        Op::Mul, a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Var div(Var a, Var b) {
    return binary(
        Op::Div, a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Var neg(Var a) {
    return unary(Op::Neg, a, [](double x) { return -x; }, [](double) { return -1.0; });
}

Var log(Var x, double guard) {
    for (double v : x.value().values()) {
        if (!(v + guard > 0.0)) {
            throw DomainError("log of non-positive value " + std::to_string(v + guard));
        }
    }
    return unary(
        Op::Log, x, [guard](double v) { return std::log(v + guard); },
        [guard](double v) { return 1.0 / (v + guard); });
}

Var exp(Var x) {
    return unary(Op::Exp, x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

Var relu(Var x) {
    return unary(
        Op::Relu, x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) { return sub(a, b); }
Var operator*(Var a, Var b) { return mul(a, b); }
Var operator/(Var a, Var b) { return div(a, b); }
Var operator-(Var a) { return neg(a); }
Var operator+(Var a, double b) { return add(a, a.tape().constant(b)); }
Var operator+(double a, Var b) { return add(b.tape().constant(a), b); }
Var operator-(Var a, double b) { return sub(a, a.tape().constant(b)); }
Var operator-(double a, Var b) { return sub(b.tape().constant(a), b); }
Var operator*(Var a, double b) { return mul(a, a.tape().constant(b)); }
Var operator*(double a, Var b) { return mul(b.tape().constant(a), b); }
Var operator/(Var a, double b) { return div(a, a.tape().constant(b)); }
Var operator/(double a, Var b) { return div(b.tape().constant(a), b); }

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
    same_tape(a, b);
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t n = a.value().rows(), m = a.value().cols(), k = b.value().cols();
    if (b.value().rows() != m) {
        throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()));
    }
    Tensor out(Shape{n, k});
    as_mat(out, n, k).noalias() = as_mat(a.value(), n, m) * as_mat(b.value(), m, k);
    return a.tape().record(
        Op::MatMul, {a.id(), b.id()}, std::move(out),
        [n, m, k](const Tape& tape, std::span<const std::size_t> parents, const Tensor& g,
                  GradSink& sink) {
            const Tensor& av = tape.node(parents[0]).output;
            const Tensor& bv = tape.node(parents[1]).output;
            if (sink.wanted(0)) {
                as_mat(sink.slot(0), n, m).noalias() += as_mat(g, n, k) * as_mat(bv, m, k).transpose();
            }
            if (sink.wanted(1)) {
                as_mat(sink.slot(1), m, k).noalias() += as_mat(av, n, m).transpose() * as_mat(g, n, k);
            }
        });
}

Var transpose(Var a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.value().rows(), c = a.value().cols();
    Tensor out(Shape{c, r});
    as_mat(out, c, r) = as_mat(a.value(), r, c).transpose();
    return a.tape().record(Op::Transpose, {a.id()}, std::move(out),
                           [r, c](const Tape&, std::span<const std::size_t>, const Tensor& g,
                                  GradSink& sink) {
                               Tensor gx(Shape{r, c});
                               as_mat(gx, r, c) = as_mat(g, c, r).transpose();
                               sink.add(0, std::move(gx));
                           });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping
// ---------------------------------------------------------------------------

Var softmax_rows(Var x) {
    require_rank(x, 2, "softmax_rows");
    const std::size_t rows = x.value().rows(), cols = x.value().cols();
    Tensor out(x.shape());
    const Tensor& xv = x.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * cols;
        double* o = out.data() + r * cols;
        const double mx = *std::max_element(in, in + cols);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) total += (o[c] = std::exp(in[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
    }
    const std::size_t self = x.tape().size();
    return x.tape().record(Op::SoftmaxRows, {x.id()}, std::move(out),
                           [rows, cols, self](const Tape& tape, std::span<const std::size_t>,
                                              const Tensor& g, GradSink& sink) {
                               const Tensor& y = tape.node(self).output;
                               Tensor gx(Shape{rows, cols});
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const std::size_t o = r * cols;
                                   double dot = 0.0;
                                   for (std::size_t c = 0; c < cols; ++c) dot += g[o + c] * y[o + c];
                                   for (std::size_t c = 0; c < cols; ++c) gx[o + c] = y[o + c] * (g[o + c] - dot);
                               }
                               sink.add(0, std::move(gx));
                           });
}

Var mean_rows(Var x) {
    const auto& s = x.shape();
    if (s.empty()) throw DimensionError("mean_rows needs a batch axis");
    const std::size_t b = s[0];
    Shape rest(s.begin() + 1, s.end());
    const std::size_t inner = shape_size(rest);
    Tensor out(rest);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < inner; ++j) out[j] += xv[i * inner + j];
    }
    for (std::size_t j = 0; j < inner; ++j) out[j] /= static_cast<double>(b);
    return x.tape().record(Op::MeanRows, {x.id()}, std::move(out),
                           [b, inner, s](const Tape&, std::span<const std::size_t>, const Tensor& g,
                                         GradSink& sink) {
                               Tensor gx(s);
                               const double inv = 1.0 / static_cast<double>(b);
                               for (std::size_t i = 0; i < b; ++i) {
                                   for (std::size_t j = 0; j < inner; ++j) gx[i * inner + j] = g[j] * inv;
                               }
                               sink.add(0, std::move(gx));
                           });
}

Var sum_all(Var x) {
    double total = 0.0;
    for (double v : x.value().values()) total += v;
    return x.tape().record(Op::SumAll, {x.id()}, Tensor::scalar(total),
                           [](const Tape& tape, std::span<const std::size_t> parents, const Tensor& g,
                              GradSink& sink) {
                               sink.add(0, Tensor(tape.node(parents[0]).output.shape(), g[0]));
                           });
}

Var mean_all(Var x) {
    const double n = static_cast<double>(x.value().size());
    double total = 0.0;
    for (double v : x.value().values()) total += v;
    return x.tape().record(Op::MeanAll, {x.id()}, Tensor::scalar(total / n),
                           [n](const Tape& tape, std::span<const std::size_t> parents, const Tensor& g,
                               GradSink& sink) {
                               sink.add(0, Tensor(tape.node(parents[0]).output.shape(), g[0] / n));
                           });
}

Var column(Var x, std::size_t k) {
    require_rank(x, 2, "column");
    const std::size_t rows = x.value().rows(), cols = x.value().cols();
    if (k >= cols) throw DimensionError("column index " + std::to_string(k) + " out of range");
    Tensor out(Shape{rows});
    for (std::size_t r = 0; r < rows; ++r) out[r] = x.value()[r * cols + k];
    return x.tape().record(Op::Column, {x.id()}, std::move(out),
                           [rows, cols, k](const Tape&, std::span<const std::size_t>, const Tensor& g,
                                           GradSink& sink) {
                               Tensor& gx = sink.slot(0);
                               for (std::size_t r = 0; r < rows; ++r) gx[r * cols + k] += g[r];
                           });
}

Var reshape(Var x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    const Shape original = x.shape();
    return x.tape().record(Op::Reshape, {x.id()}, std::move(out),
                           [original](const Tape&, std::span<const std::size_t>, const Tensor& g,
                                      GradSink& sink) { sink.add(0, g.reshaped(original)); });
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

Var avg_pool2d(Var x, std::size_t kernel, std::size_t stride) {
    const auto d = dims4(x, "avg_pool2d");
    if (kernel == 0 || stride == 0) throw ArgumentError("avg_pool2d: kernel and stride must be positive");
    const std::size_t kh = std::min(kernel, d.h), kw = std::min(kernel, d.w);
    const std::size_t ho = pooled_extent(d.h, kh, stride), wo = pooled_extent(d.w, kw, stride);
    const double inv = 1.0 / static_cast<double>(kh * kw);
    Tensor out(Shape{d.b, d.c, ho, wo});
    const Tensor& xv = x.value();
    for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
        const double* in = xv.data() + bc * d.h * d.w;
        double* o = out.data() + bc * ho * wo;
        for (std::size_t i = 0; i < ho; ++i) {
            for (std::size_t j = 0; j < wo; ++j) {
                double s = 0.0;
                for (std::size_t u = 0; u < kh; ++u) {
                    for (std::size_t v = 0; v < kw; ++v) s += in[(i * stride + u) * d.w + j * stride + v];
                }
                o[i * wo + j] = s * inv;
            }
        }
    }
    return x.tape().record(
        Op::AvgPool2d, {x.id()}, std::move(out),
        [d, kh, kw, ho, wo, stride, inv](const Tape&, std::span<const std::size_t>, const Tensor& g,
                                         GradSink& sink) {
            Tensor& gx = sink.slot(0);
            for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
                double* gi = gx.data() + bc * d.h * d.w;
                const double* go = g.data() + bc * ho * wo;
                for (std::size_t i = 0; i < ho; ++i) {
                    for (std::size_t j = 0; j < wo; ++j) {
                        const double v0 = go[i * wo + j] * inv;
                        for (std::size_t u = 0; u < kh; ++u) {
                            for (std::size_t v = 0; v < kw; ++v) gi[(i * stride + u) * d.w + j * stride + v] += v0;
                        }
                    }
                }
            }
        });
}

Var max_pool2d(Var x, std::size_t kernel, std::size_t stride) {
    const auto d = dims4(x, "max_pool2d");
    if (kernel == 0 || stride == 0) throw ArgumentError("max_pool2d: kernel and stride must be positive");
    const std::size_t kh = std::min(kernel, d.h), kw = std::min(kernel, d.w);
    const std::size_t ho = pooled_extent(d.h, kh, stride), wo = pooled_extent(d.w, kw, stride);
    Tensor out(Shape{d.b, d.c, ho, wo});
    std::vector<std::size_t> argmax(out.size());
    const Tensor& xv = x.value();
    for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
        const std::size_t base = bc * d.h * d.w;
        for (std::size_t i = 0; i < ho; ++i) {
            for (std::size_t j = 0; j < wo; ++j) {
                std::size_t best = base + (i * stride) * d.w + j * stride;
                for (std::size_t u = 0; u < kh; ++u) {
                    for (std::size_t v = 0; v < kw; ++v) {
                        const std::size_t idx = base + (i * stride + u) * d.w + j * stride + v;
                        if (xv[idx] > xv[best]) best = idx;
                    }
                }
                const std::size_t o = bc * ho * wo + i * wo + j;
                out[o] = xv[best];
                argmax[o] = best;
            }
        }
    }
    return x.tape().record(Op::MaxPool2d, {x.id()}, std::move(out),
                           [argmax = std::move(argmax)](const Tape&, std::span<const std::size_t>,
                                                        const Tensor& g, GradSink& sink) {
                               Tensor& gx = sink.slot(0);
                               for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
                           });
}

namespace {

struct ConvGeom {
    Dims4 in;
    std::size_t out_c, k, stride, pad, ho, wo;
    std::size_t patch() const { return in.c * k * k; }
    std::size_t pixels() const { return ho * wo; }
};

// col[(c*k + u)*k + v][i*wo + j] = x[c][i*s + u - p][j*s + v - p]
void im2col(const double* x, const ConvGeom& g, double* col) {
    for (std::size_t c = 0; c < g.in.c; ++c) {
        for (std::size_t u = 0; u < g.k; ++u) {
            for (std::size_t v = 0; v < g.k; ++v) {
                double* row = col + ((c * g.k + u) * g.k + v) * g.pixels();
                for (std::size_t i = 0; i < g.ho; ++i) {
                    const long yy = static_cast<long>(i * g.stride + u) - static_cast<long>(g.pad);
                    for (std::size_t j = 0; j < g.wo; ++j) {
                        const long xx = static_cast<long>(j * g.stride + v) - static_cast<long>(g.pad);
                        const bool inside = yy >= 0 && xx >= 0 && yy < static_cast<long>(g.in.h) &&
                                            xx < static_cast<long>(g.in.w);
                        row[i * g.wo + j] = inside ? x[(c * g.in.h + yy) * g.in.w + xx] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* col, const ConvGeom& g, double* x) {
    for (std::size_t c = 0; c < g.in.c; ++c) {
        for (std::size_t u = 0; u < g.k; ++u) {
            for (std::size_t v = 0; v < g.k; ++v) {
                const double* row = col + ((c * g.k + u) * g.k + v) * g.pixels();
                for (std::size_t i = 0; i < g.ho; ++i) {
                    const long yy = static_cast<long>(i * g.stride + u) - static_cast<long>(g.pad);
                    if (yy < 0 || yy >= static_cast<long>(g.in.h)) continue;
                    for (std::size_t j = 0; j < g.wo; ++j) {
                        const long xx = static_cast<long>(j * g.stride + v) - static_cast<long>(g.pad);
                        if (xx < 0 || xx >= static_cast<long>(g.in.w)) continue;
                        x[(c * g.in.h + yy) * g.in.w + xx] += row[i * g.wo + j];
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(Var x, Var weight, Var bias, std::size_t stride, std::size_t padding) {
    same_tape(x, weight);
    same_tape(x, bias);
    const auto d = dims4(x, "conv2d");
    require_rank(weight, 4, "conv2d weight");
    const auto& ws = weight.shape();
    if (ws[1] != d.c || ws[2] != ws[3]) {
        throw DimensionError("conv2d weight " + shape_str(ws) + " incompatible with input " +
                             shape_str(x.shape()));
    }
    if (bias.value().size() != ws[0]) throw DimensionError("conv2d bias size mismatch");
    if (stride == 0) throw ArgumentError("conv2d stride must be positive");
    const std::size_t k = ws[2];
    if (d.h + 2 * padding < k || d.w + 2 * padding < k) {
        throw DimensionError("conv2d kernel larger than padded input " + shape_str(x.shape()));
    }
    ConvGeom g{d, ws[0], k, stride, padding, 0, 0};
    g.ho = (d.h + 2 * padding - k) / stride + 1;
    g.wo = (d.w + 2 * padding - k) / stride + 1;

    Tensor out(Shape{d.b, g.out_c, g.ho, g.wo});
    std::vector<double> col(g.patch() * g.pixels());
    const auto W = as_mat(weight.value(), g.out_c, g.patch());
    const Tensor& bv = bias.value();
    for (std::size_t b = 0; b < d.b; ++b) {
        im2col(x.value().data() + b * d.c * d.h * d.w, g, col.data());
        MapMat o(out.data() + b * g.out_c * g.pixels(), g.out_c, g.pixels());
        o.noalias() = W * MapConstMat(col.data(), g.patch(), g.pixels());
        for (std::size_t oc = 0; oc < g.out_c; ++oc) o.row(oc).array() += bv[oc];
    }

    return x.tape().record(
        Op::Conv2d, {x.id(), weight.id(), bias.id()}, std::move(out),
        [g](const Tape& tape, std::span<const std::size_t> parents, const Tensor& grad, GradSink& sink) {
            const Tensor& xv = tape.node(parents[0]).output;
            const Tensor& wv = tape.node(parents[1]).output;
            const auto W = as_mat(wv, g.out_c, g.patch());
            std::vector<double> col(g.patch() * g.pixels());
            std::vector<double> dcol(g.patch() * g.pixels());
            const std::size_t in_sz = g.in.c * g.in.h * g.in.w;
            for (std::size_t b = 0; b < g.in.b; ++b) {
                MapConstMat go(grad.data() + b * g.out_c * g.pixels(), g.out_c, g.pixels());
                if (sink.wanted(1)) {
                    im2col(xv.data() + b * in_sz, g, col.data());
                    as_mat(sink.slot(1), g.out_c, g.patch()).noalias() +=
                        go * MapConstMat(col.data(), g.patch(), g.pixels()).transpose();
                }
                if (sink.wanted(2)) {
                    Tensor& gb = sink.slot(2);
                    for (std::size_t oc = 0; oc < g.out_c; ++oc) gb[oc] += go.row(oc).sum();
                }
                if (sink.wanted(0)) {
                    MapMat(dcol.data(), g.patch(), g.pixels()).noalias() = W.transpose() * go;
                    col2im(dcol.data(), g, sink.slot(0).data() + b * in_sz);
                }
            }
        });
}

Var spatial_slice(Var x, std::size_t h, std::size_t w) {
    const auto d = dims4(x, "spatial_slice");
    if (h >= d.h || w >= d.w) throw DimensionError("spatial_slice location out of range");
    Tensor out(Shape{d.b, d.c});
    const Tensor& xv = x.value();
    for (std::size_t b = 0; b < d.b; ++b) {
        for (std::size_t c = 0; c < d.c; ++c) out[b * d.c + c] = xv[((b * d.c + c) * d.h + h) * d.w + w];
    }
    return x.tape().record(Op::SpatialSlice, {x.id()}, std::move(out),
                           [d, h, w](const Tape&, std::span<const std::size_t>, const Tensor& g,
                                     GradSink& sink) {
                               Tensor& gx = sink.slot(0);
                               for (std::size_t b = 0; b < d.b; ++b) {
                                   for (std::size_t c = 0; c < d.c; ++c) {
                                       gx[((b * d.c + c) * d.h + h) * d.w + w] += g[b * d.c + c];
                                   }
                               }
                           });
}

Var channels_last(Var x) {
    const auto d = dims4(x, "channels_last");
    const std::size_t hw = d.h * d.w;
    Tensor out(Shape{d.b, d.h, d.w, d.c});
    const Tensor& xv = x.value();
    for (std::size_t b = 0; b < d.b; ++b) {
        for (std::size_t c = 0; c < d.c; ++c) {
            for (std::size_t l = 0; l < hw; ++l) out[(b * hw + l) * d.c + c] = xv[(b * d.c + c) * hw + l];
        }
    }
    return x.tape().record(Op::ChannelsLast, {x.id()}, std::move(out),
                           [d, hw](const Tape&, std::span<const std::size_t>, const Tensor& g, GradSink& sink) {
                               Tensor gx(Shape{d.b, d.c, d.h, d.w});
                               for (std::size_t b = 0; b < d.b; ++b) {
                                   for (std::size_t c = 0; c < d.c; ++c) {
                                       for (std::size_t l = 0; l < hw; ++l) {
                                           gx[(b * d.c + c) * hw + l] = g[(b * hw + l) * d.c + c];
                                       }
                                   }
                               }
                               sink.add(0, std::move(gx));
                           });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

namespace {

struct FeatureLayout {
    std::size_t batch, features, inner;  // x viewed as [batch x features x inner]
    std::size_t count() const { return batch * inner; }
    std::size_t index(std::size_t b, std::size_t f, std::size_t i) const {
        return (b * features + f) * inner + i;
    }
};

FeatureLayout feature_layout(const Var& x, const Var& scale, const Var& shift) {
    const auto& s = x.shape();
    if (s.size() < 2) throw DimensionError("batch norm needs [B x F ...], got " + shape_str(s));
    FeatureLayout l{s[0], s[1], shape_size(Shape(s.begin() + 2, s.end()))};
    if (scale.value().size() != l.features || shift.value().size() != l.features) {
        throw DimensionError("batch norm scale/shift size must equal the feature count");
    }
    return l;
}

}  // namespace

BatchNormOutput batch_norm_train(Var x, Var scale, Var shift, double var_floor) {
    same_tape(x, scale);
    same_tape(x, shift);
    const FeatureLayout l = feature_layout(x, scale, shift);
    const Tensor& xv = x.value();
    const double m = static_cast<double>(l.count());

    Tensor mean(Shape{l.features}), var(Shape{l.features});
    std::vector<double> denom(l.features);
    std::vector<bool> floored(l.features);
    for (std::size_t f = 0; f < l.features; ++f) {
        double s = 0.0;
        for (std::size_t b = 0; b < l.batch; ++b) {
            for (std::size_t i = 0; i < l.inner; ++i) s += xv[l.index(b, f, i)];
        }
        const double mu = s / m;
        double ss = 0.0;
        for (std::size_t b = 0; b < l.batch; ++b) {
            for (std::size_t i = 0; i < l.inner; ++i) {
                const double dlt = xv[l.index(b, f, i)] - mu;
                ss += dlt * dlt;
            }
        }
        mean[f] = mu;
        var[f] = ss / m;
        floored[f] = var[f] < var_floor;
        denom[f] = std::sqrt(std::max(var[f], var_floor));
    }

    Tensor xhat(xv.shape()), out(xv.shape());
    const Tensor& gamma = scale.value();
    const Tensor& beta = shift.value();
    for (std::size_t b = 0; b < l.batch; ++b) {
        for (std::size_t f = 0; f < l.features; ++f) {
            for (std::size_t i = 0; i < l.inner; ++i) {
                const std::size_t idx = l.index(b, f, i);
                xhat[idx] = (xv[idx] - mean[f]) / denom[f];
                out[idx] = gamma[f] * xhat[idx] + beta[f];
            }
        }
    }

    Var y = x.tape().record(
        Op::BatchNorm, {x.id(), scale.id(), shift.id()}, std::move(out),
        [l, m, xhat = std::move(xhat), denom = std::move(denom), floored = std::move(floored)](
            const Tape& tape, std::span<const std::size_t> parents, const Tensor& g, GradSink& sink) {
            const Tensor& gamma = tape.node(parents[1]).output;
            if (sink.wanted(1) || sink.wanted(2)) {
                Tensor gg(Shape{l.features}), gbeta(Shape{l.features});
                for (std::size_t b = 0; b < l.batch; ++b) {
                    for (std::size_t f = 0; f < l.features; ++f) {
                        for (std::size_t i = 0; i < l.inner; ++i) {
                            const std::size_t idx = l.index(b, f, i);
                            gg[f] += g[idx] * xhat[idx];
                            gbeta[f] += g[idx];
                        }
                    }
                }
                if (sink.wanted(1)) sink.add(1, std::move(gg));
                if (sink.wanted(2)) sink.add(2, std::move(gbeta));
            }
            if (!sink.wanted(0)) return;
            Tensor gx(g.shape());
            for (std::size_t f = 0; f < l.features; ++f) {
                double mean_d = 0.0, mean_dx = 0.0;
                for (std::size_t b = 0; b < l.batch; ++b) {
                    for (std::size_t i = 0; i < l.inner; ++i) {
                        const std::size_t idx = l.index(b, f, i);
                        const double d = g[idx] * gamma[f];
                        mean_d += d;
                        mean_dx += d * xhat[idx];
                    }
                }
                mean_d /= m;
                mean_dx /= m;
                if (floored[f]) mean_dx = 0.0;  // constant denominator below the floor
                for (std::size_t b = 0; b < l.batch; ++b) {
                    for (std::size_t i = 0; i < l.inner; ++i) {
                        const std::size_t idx = l.index(b, f, i);
                        gx[idx] = (g[idx] * gamma[f] - mean_d - xhat[idx] * mean_dx) / denom[f];
                    }
                }
            }
            sink.add(0, std::move(gx));
        });
    return {y, std::move(mean), std::move(var)};
}

Var batch_norm_eval(Var x, Var scale, Var shift, const Tensor& mean, const Tensor& var,
                    double var_floor) {
    same_tape(x, scale);
    same_tape(x, shift);
    const FeatureLayout l = feature_layout(x, scale, shift);
    if (mean.size() != l.features || var.size() != l.features) {
        throw DimensionError("batch norm running statistics size mismatch");
    }
    const Tensor& xv = x.value();
    std::vector<double> inv(l.features);
    for (std::size_t f = 0; f < l.features; ++f) inv[f] = 1.0 / std::sqrt(std::max(var[f], var_floor));
    Tensor xhat(xv.shape()), out(xv.shape());
    for (std::size_t b = 0; b < l.batch; ++b) {
        for (std::size_t f = 0; f < l.features; ++f) {
            for (std::size_t i = 0; i < l.inner; ++i) {
                const std::size_t idx = l.index(b, f, i);
                xhat[idx] = (xv[idx] - mean[f]) * inv[f];
                out[idx] = scale.value()[f] * xhat[idx] + shift.value()[f];
            }
        }
    }
    return x.tape().record(
        Op::BatchNorm, {x.id(), scale.id(), shift.id()}, std::move(out),
        [l, inv = std::move(inv), xhat = std::move(xhat)](const Tape& tape, std::span<const std::size_t> parents,
                                                          const Tensor& g, GradSink& sink) {
            const Tensor& gamma = tape.node(parents[1]).output;
            Tensor gx(g.shape()), gg(Shape{l.features}), gbeta(Shape{l.features});
            for (std::size_t b = 0; b < l.batch; ++b) {
                for (std::size_t f = 0; f < l.features; ++f) {
                    for (std::size_t i = 0; i < l.inner; ++i) {
                        const std::size_t idx = l.index(b, f, i);
                        gx[idx] = g[idx] * gamma[f] * inv[f];
                        gg[f] += g[idx] * xhat[idx];
                        gbeta[f] += g[idx];
                    }
                }
            }
            if (sink.wanted(0)) sink.add(0, std::move(gx));
            if (sink.wanted(1)) sink.add(1, std::move(gg));
            if (sink.wanted(2)) sink.add(2, std::move(gbeta));
        });
}

// ---------------------------------------------------------------------------
// Losses and gradient control
// ---------------------------------------------------------------------------

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
    require_rank(logits, 2, "softmax_cross_entropy");
    const std::size_t rows = logits.value().rows(), cols = logits.value().cols();
    if (labels.size() != rows) throw DimensionError("softmax_cross_entropy: label count != batch size");
    Tensor probs(logits.shape());
    double loss = 0.0;
    const Tensor& z = logits.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const int y = labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= cols) throw ArgumentError("label out of range");
        const double* in = z.data() + r * cols;
        const double mx = *std::max_element(in, in + cols);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) total += (probs[r * cols + c] = std::exp(in[c] - mx));
        for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] /= total;
        loss -= (in[y] - mx) - std::log(total);
    }
    loss /= static_cast<double>(rows);
    std::vector<int> ys(labels.begin(), labels.end());
    return logits.tape().record(Op::SoftmaxCrossEntropy, {logits.id()}, Tensor::scalar(loss),
                                [rows, cols, probs = std::move(probs), ys = std::move(ys)](
                                    const Tape&, std::span<const std::size_t>, const Tensor& g,
                                    GradSink& sink) {
                                    Tensor gx = probs;
                                    for (std::size_t r = 0; r < rows; ++r) gx[r * cols + ys[r]] -= 1.0;
                                    const double s = g[0] / static_cast<double>(rows);
                                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= s;
                                    sink.add(0, std::move(gx));
                                });
}

Var stop_gradient(Var x) {
    Var y = x.tape().record(Op::StopGradient, {x.id()}, x.value(), nullptr);
    // The record call cannot set the flag directly; patch the freshly appended node.
    const_cast<TapeNode&>(x.tape().node(y.id())).stop_grad = true;
    return y;
}

}  // namespace nb
