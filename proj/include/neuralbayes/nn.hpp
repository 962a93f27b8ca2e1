#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "neuralbayes/autodiff.hpp"
#include "neuralbayes/tensor.hpp"

namespace nb {

enum class Mode { Train, Eval };

struct Parameter {
    std::string name;
    Tensor value;
};

/// y = x W^T + b with W [out x in].
struct DenseLayer {
    Parameter weight;
    Parameter bias;
};

struct Conv2dLayer {
    Parameter kernels;  // [out x in x k x k]
    Parameter bias;     // [out]
    std::size_t stride = 1;
    std::size_t padding = 0;
};

struct BatchNormLayer {
    Parameter scale;
    Parameter shift;
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.1;
    double var_floor = 1e-5;
};

struct ReluLayer {};

struct PoolLayer {
    enum class Kind { Max, Avg };
    Kind kind = Kind::Max;
    std::size_t kernel = 2;
    std::size_t stride = 2;
    bool global = false;  // average the whole spatial field to 1x1
};

/// [B x C x H x W] -> [B x C*H*W]
struct FlattenLayer {};

struct SoftmaxLayer {};

using Layer = std::variant<DenseLayer, Conv2dLayer, BatchNormLayer, ReluLayer, PoolLayer,
                           FlattenLayer, SoftmaxLayer>;

struct ForwardOptions {
    Mode mode = Mode::Train;
    /// Running statistics of batch norm layers are updated in train mode unless this
    /// is false (used for auxiliary passes such as perturbed inputs).
    bool update_running_stats = true;
};

struct ForwardResult {
    Var output;
    std::vector<Var> states;  // one per declared tap, in network order
};

/// Ordered layer stack with declared taps: the outputs of the tapped layers are
/// exported as hidden states alongside the final output.
class Network {
public:
    Network() = default;
    Network(std::vector<Layer> layers, std::vector<std::size_t> taps, Shape sample_shape);

    ForwardResult forward(Tape& tape, Var x, const ForwardOptions& opts);
    /// Eval-mode forward without gradients; does not mutate the network.
    Tensor predict(const Tensor& x) const;
    /// Eval-mode hidden states (one tensor per tap) without gradients.
    std::vector<Tensor> predict_states(const Tensor& x) const;

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    std::size_t parameter_count() const;

    std::vector<Layer>& layers() { return layers_; }
    const std::vector<Layer>& layers() const { return layers_; }
    const std::vector<std::size_t>& taps() const { return taps_; }
    /// Per-sample input shape, e.g. {784} or {3, 32, 32}.
    const Shape& sample_shape() const { return sample_shape_; }

private:
    ForwardResult run(Tape& tape, Var x, const ForwardOptions& opts, bool mutate);

    std::vector<Layer> layers_;
    std::vector<std::size_t> taps_;
    Shape sample_shape_;
};

/// Orthogonal matrix: W W^T = I when rows <= cols, W^T W = I otherwise.
Tensor orthogonal_init(std::size_t rows, std::size_t cols, std::uint64_t seed);

struct MlpSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden;
    bool batchnorm = true;
    std::size_t output_dim = 0;  // 0: no output head, the last hidden state is the output
    bool softmax_output = false;
};

/// Dense[-BatchNorm]-ReLU blocks (each ReLU tapped), optionally followed by a dense head.
Network make_mlp(const MlpSpec& spec, std::uint64_t seed);

/// Builds a CNN from shorthand such as
/// "C(200,3,1,0)-P(2,2,0,max)-C(500,3,1,0)-P(.,.,.,avg)-FC(10)". Every convolution is
/// followed by batch norm (if enabled) and a tapped ReLU.
Network make_cnn(const std::string& spec, const Shape& sample_shape, std::uint64_t seed,
                 bool batchnorm = true, bool softmax_output = false);

}  // namespace nb
