#include "neuralbayes/nn.hpp"

#include <Eigen/Dense>
#include <regex>

#include "neuralbayes/errors.hpp"
#include "neuralbayes/random.hpp"

namespace nb {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

struct StatUpdate {
    std::size_t layer;
    Tensor mean;
    Tensor var;
    std::size_t count;
};

std::string param_name(std::size_t layer, const char* what) {
    return "L" + std::to_string(layer) + "." + what;
}

void name_parameters(std::vector<Layer>& layers) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        std::visit(Overloaded{
                       [&](DenseLayer& l) {
                           l.weight.name = param_name(i, "weight");
                           l.bias.name = param_name(i, "bias");
                       },
                       [&](Conv2dLayer& l) {
                           l.kernels.name = param_name(i, "weight");
                           l.bias.name = param_name(i, "bias");
                       },
                       [&](BatchNormLayer& l) {
                           l.scale.name = param_name(i, "scale");
                           l.shift.name = param_name(i, "shift");
                       },
                       [](auto&) {},
                   },
                   layers[i]);
    }
}

}  // namespace

Network::Network(std::vector<Layer> layers, std::vector<std::size_t> taps, Shape sample_shape)
    : layers_(std::move(layers)), taps_(std::move(taps)), sample_shape_(std::move(sample_shape)) {
    for (std::size_t i = 0; i < taps_.size(); ++i) {
        if (taps_[i] >= layers_.size()) throw ArgumentError("tap references a missing layer");
        if (i > 0 && taps_[i] <= taps_[i - 1]) throw ArgumentError("taps must be strictly increasing");
    }
    name_parameters(layers_);
}

ForwardResult Network::forward(Tape& tape, Var x, const ForwardOptions& opts) {
    return run(tape, x, opts, true);
}

ForwardResult Network::run(Tape& tape, Var x, const ForwardOptions& opts, bool mutate) {
    const Shape& xs = x.shape();
    if (xs.size() != sample_shape_.size() + 1 || !std::equal(sample_shape_.begin(), sample_shape_.end(), xs.begin() + 1)) {
        throw DimensionError("network expects [B x " + shape_str(sample_shape_) + "] input, got " + shape_str(xs));
    }
    const bool train = opts.mode == Mode::Train;
    std::vector<StatUpdate> updates;
    ForwardResult res;
    Var h = x;
    std::size_t next_tap = 0;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        std::visit(Overloaded{
                       [&](const DenseLayer& l) {
                           if (h.value().rank() != 2 || h.value().cols() != l.weight.value.cols()) {
                               throw DimensionError("dense layer " + std::to_string(i) + " expects " +
                                                    std::to_string(l.weight.value.cols()) + " features, got " +
                                                    shape_str(h.shape()));
                           }
                           Var w = tape.leaf(l.weight.name, l.weight.value);
                           Var b = tape.leaf(l.bias.name, l.bias.value);
                           h = matmul(h, transpose(w)) + b;
                       },
                       [&](const Conv2dLayer& l) {
                           h = conv2d(h, tape.leaf(l.kernels.name, l.kernels.value),
                                      tape.leaf(l.bias.name, l.bias.value), l.stride, l.padding);
                       },
                       [&](const BatchNormLayer& l) {
                           Var g = tape.leaf(l.scale.name, l.scale.value);
                           Var b = tape.leaf(l.shift.name, l.shift.value);
                           if (train) {
                               if (h.shape()[0] < 2) {
                                   throw ArgumentError("batch norm in train mode needs a batch of at least 2");
                               }
                               auto bn = batch_norm_train(h, g, b, l.var_floor);
                               const std::size_t count = h.value().size() / h.shape()[1];
                               h = bn.out;
                               if (opts.update_running_stats) {
                                   updates.push_back({i, std::move(bn.batch_mean), std::move(bn.batch_var), count});
                               }
                           } else {
                               h = batch_norm_eval(h, g, b, l.running_mean, l.running_var, l.var_floor);
                           }
                       },
                       [&](const ReluLayer&) { h = relu(h); },
                       [&](const PoolLayer& l) {
                           if (l.global) {
                               const auto& s = h.shape();
                               if (s.size() != 4) throw DimensionError("global pooling needs [B x C x H x W]");
                               h = avg_pool2d(h, std::max(s[2], s[3]), std::max(s[2], s[3]));
                           } else if (l.kind == PoolLayer::Kind::Max) {
                               h = max_pool2d(h, l.kernel, l.stride);
                           } else {
                               h = avg_pool2d(h, l.kernel, l.stride);
                           }
                       },
                       [&](const FlattenLayer&) {
                           const std::size_t b = h.shape()[0];
                           h = reshape(h, Shape{b, h.value().size() / b});
                       },
                       [&](const SoftmaxLayer&) { h = softmax_rows(h); },
                   },
                   layers_[i]);
        if (next_tap < taps_.size() && taps_[next_tap] == i) {
            res.states.push_back(h);
            ++next_tap;
        }
    }
    res.output = h;

    if (mutate) {
        for (auto& u : updates) {
            auto& bn = std::get<BatchNormLayer>(layers_[u.layer]);
            const double m = bn.momentum;
            const double unbias = u.count > 1 ? static_cast<double>(u.count) / static_cast<double>(u.count - 1) : 1.0;
            for (std::size_t f = 0; f < u.mean.size(); ++f) {
                bn.running_mean[f] = (1.0 - m) * bn.running_mean[f] + m * u.mean[f];
                bn.running_var[f] = (1.0 - m) * bn.running_var[f] + m * u.var[f] * unbias;
            }
        }
    }
    return res;
}

Tensor Network::predict(const Tensor& x) const {
    Tape tape;
    auto res = const_cast<Network*>(this)->run(tape, tape.constant(x), {Mode::Eval, false}, false);
    return res.output.value();
}

std::vector<Tensor> Network::predict_states(const Tensor& x) const {
    Tape tape;
    auto res = const_cast<Network*>(this)->run(tape, tape.constant(x), {Mode::Eval, false}, false);
    std::vector<Tensor> out;
    out.reserve(res.states.size());
    for (auto& s : res.states) out.push_back(s.value());
    return out;
}

std::vector<Parameter*> Network::parameters() {
    std::vector<Parameter*> out;
    for (auto& layer : layers_) {
        std::visit(Overloaded{
                       [&](DenseLayer& l) { out.insert(out.end(), {&l.weight, &l.bias}); },
                       [&](Conv2dLayer& l) { out.insert(out.end(), {&l.kernels, &l.bias}); },
                       [&](BatchNormLayer& l) { out.insert(out.end(), {&l.scale, &l.shift}); },
                       [](auto&) {},
                   },
                   layer);
    }
    return out;
}

std::vector<const Parameter*> Network::parameters() const {
    auto ps = const_cast<Network*>(this)->parameters();
    return {ps.begin(), ps.end()};
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->value.size();
    return n;
}

Tensor orthogonal_init(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    if (rows == 0 || cols == 0) throw ArgumentError("orthogonal_init needs positive dimensions");
    const std::size_t tall = std::max(rows, cols), narrow = std::min(rows, cols);
    Rng rng(seed);
    Eigen::MatrixXd a(tall, narrow);
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
        for (Eigen::Index i = 0; i < a.rows(); ++i) a(i, j) = standard_normal(rng);
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(tall, narrow);
    const Eigen::MatrixXd r = qr.matrixQR();
    // Sign fix makes the factorization unique, so the result is Haar distributed.
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
        if (r(j, j) < 0) q.col(j) *= -1.0;
    }
    Tensor out(Shape{rows, cols});
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            out.at(i, j) = rows >= cols ? q(i, j) : q(j, i);
        }
    }
    return out;
}

namespace {

DenseLayer dense(std::size_t in, std::size_t out, std::uint64_t seed) {
    return {{"", orthogonal_init(out, in, seed)}, {"", Tensor(Shape{out})}};
}

BatchNormLayer batchnorm(std::size_t features) {
    BatchNormLayer bn;
    bn.scale.value = Tensor(Shape{features}, 1.0);
    bn.shift.value = Tensor(Shape{features}, 0.0);
    bn.running_mean = Tensor(Shape{features}, 0.0);
    bn.running_var = Tensor(Shape{features}, 1.0);
    return bn;
}

}  // namespace

Network make_mlp(const MlpSpec& spec, std::uint64_t seed) {
    if (spec.input_dim == 0) throw ArgumentError("make_mlp: input_dim must be positive");
    std::vector<Layer> layers;
    std::vector<std::size_t> taps;
    std::size_t width = spec.input_dim;
    std::uint64_t stream = 0;
    for (std::size_t h : spec.hidden) {
        layers.emplace_back(dense(width, h, derive_seed(seed, stream++)));
        if (spec.batchnorm) layers.emplace_back(batchnorm(h));
        layers.emplace_back(ReluLayer{});
        taps.push_back(layers.size() - 1);
        width = h;
    }
    if (spec.output_dim > 0) {
        layers.emplace_back(dense(width, spec.output_dim, derive_seed(seed, stream++)));
        if (spec.softmax_output) layers.emplace_back(SoftmaxLayer{});
    }
    return Network(std::move(layers), std::move(taps), Shape{spec.input_dim});
}

Network make_cnn(const std::string& spec, const Shape& sample_shape, std::uint64_t seed, bool batchnorm_on,
                 bool softmax_output) {
    if (sample_shape.size() != 3) throw ArgumentError("make_cnn: sample shape must be [C x H x W]");
    static const std::regex conv_re(R"(C\((\d+),(\d+),(\d+),(\d+)\))");
    static const std::regex pool_re(R"(P\((\d+),(\d+),(\d+),(max|avg)\))");
    static const std::regex global_re(R"(P\(\.,\.,\.,avg\))");
    static const std::regex fc_re(R"(FC\((\d+)\))");

    std::vector<Layer> layers;
    std::vector<std::size_t> taps;
    std::size_t c = sample_shape[0], h = sample_shape[1], w = sample_shape[2];
    bool flat = false;
    std::uint64_t stream = 0;

    std::string compact;
    for (char ch : spec) {
        if (ch != ' ') compact += ch;
    }
    std::size_t start = 0;
    while (start <= compact.size()) {
        std::size_t end = compact.find(")-", start);
        std::string tok = compact.substr(start, end == std::string::npos ? std::string::npos : end + 1 - start);
        start = end == std::string::npos ? compact.size() + 1 : end + 2;
        std::smatch m;
        if (std::regex_match(tok, m, conv_re)) {
            if (flat) throw ArgumentError("make_cnn: convolution after FC");
            const std::size_t out = std::stoul(m[1]), k = std::stoul(m[2]), s = std::stoul(m[3]), p = std::stoul(m[4]);
            if (h + 2 * p < k || w + 2 * p < k || s == 0) throw ArgumentError("make_cnn: bad convolution " + tok);
            Conv2dLayer conv;
            conv.kernels.value = orthogonal_init(out, c * k * k, derive_seed(seed, stream++)).reshaped(Shape{out, c, k, k});
            conv.bias.value = Tensor(Shape{out});
            conv.stride = s;
            conv.padding = p;
            layers.emplace_back(std::move(conv));
            if (batchnorm_on) layers.emplace_back(batchnorm(out));
            layers.emplace_back(ReluLayer{});
            taps.push_back(layers.size() - 1);
            c = out;
            h = (h + 2 * p - k) / s + 1;
            w = (w + 2 * p - k) / s + 1;
        } else if (std::regex_match(tok, global_re)) {
            layers.emplace_back(PoolLayer{PoolLayer::Kind::Avg, 0, 0, true});
            h = w = 1;
        } else if (std::regex_match(tok, m, pool_re)) {
            if (std::stoul(m[3]) != 0) throw ArgumentError("make_cnn: padded pooling is not supported");
            PoolLayer pool{m[4] == "max" ? PoolLayer::Kind::Max : PoolLayer::Kind::Avg, std::stoul(m[1]),
                           std::stoul(m[2]), false};
            const std::size_t kh = std::min(pool.kernel, h), kw = std::min(pool.kernel, w);
            h = (h - kh) / pool.stride + 1;
            w = (w - kw) / pool.stride + 1;
            layers.emplace_back(pool);
        } else if (std::regex_match(tok, m, fc_re)) {
            if (!flat) {
                layers.emplace_back(FlattenLayer{});
                flat = true;
            }
            const std::size_t out = std::stoul(m[1]);
            layers.emplace_back(dense(c * h * w, out, derive_seed(seed, stream++)));
            c = out;
            h = w = 1;
        } else {
            throw ArgumentError("make_cnn: cannot parse layer '" + tok + "'");
        }
    }
    if (softmax_output) {
        if (!flat) {
            layers.emplace_back(FlattenLayer{});
        }
        layers.emplace_back(SoftmaxLayer{});
    }
    return Network(std::move(layers), std::move(taps), sample_shape);
}

}  // namespace nb
