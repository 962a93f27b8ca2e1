#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "neuralbayes/autodiff.hpp"
#include "neuralbayes/data.hpp"
#include "neuralbayes/dml.hpp"
#include "neuralbayes/mim.hpp"
#include "neuralbayes/nn.hpp"
#include "neuralbayes/random.hpp"
#include "neuralbayes/report.hpp"

namespace nb {

struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::size_t step = 0;
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
};

/// One bias-corrected Adam update. Weight decay, when positive, is decoupled:
/// p -= lr * weight_decay * p before the moment step.
void adam_step(const std::vector<Parameter*>& params, const GradientMap& grads, AdamState& state);

struct AccumulationSchedule {
    std::size_t mbs = 500;
    std::size_t bs = 2000;
    std::size_t epochs = 20;

    /// Throws ConfigError unless bs >= mbs >= 1 and bs is a multiple of mbs.
    void validate() const;
    std::size_t window() const { return bs / mbs; }
};

struct TrainLog {
    std::vector<ObjectiveReport> reports;  // one per parameter update
    std::size_t epochs_run = 0;
    double wall_seconds = 0.0;
    std::uint64_t seed = 0;
    std::string config_json = "{}";

    /// JSON lines, one report per line. Wall-clock time is left out so the text is reproducible.
    std::string to_jsonl() const;
};

struct ObjectiveResult {
    Var loss;
    ObjectiveReport report;
};

/// Loss of one mini-batch. The batch is already shaped [B x sample_shape].
using Objective = std::function<ObjectiveResult(Network&, Tape&, const Tensor& batch, Rng& rng)>;

Objective mim_objective(const MimConfig& cfg);
/// Binary loss on the first softmax column when K = 2, the multi-partition loss otherwise.
/// The network output must be a K-way softmax.
Objective dml_objective(const DmlConfig& cfg);

/// Called after every epoch with the 1-based epoch number; returning false stops training.
using EpochCallback = std::function<bool(std::size_t epoch, const Network&)>;

/// Per-epoch seeded Fisher-Yates shuffle, the trailing partial mini-batch dropped,
/// gradients averaged over bs/mbs mini-batches per update. An accumulation window
/// may span an epoch boundary.
TrainLog train_objective(Network& net, const ManifoldDataset& ds, const Objective& objective,
                         const AccumulationSchedule& sched, AdamState& opt, std::uint64_t seed,
                         const EpochCallback& on_epoch = {});

/// Rows of `ds` reshaped to [|indices| x sample_shape].
Tensor gather_batch(const ManifoldDataset& ds, const std::vector<std::size_t>& indices, const Shape& sample_shape);

/// Output of the network in eval mode, evaluated in chunks.
Tensor predict_all(const Network& net, const ManifoldDataset& ds, std::size_t chunk = 1000);
/// Hidden state of one tap, flattened to [N x features]. `batch_stats` runs batch norm
/// on chunk statistics instead of the running estimates (nothing is mutated).
Tensor extract_features(const Network& net, const ManifoldDataset& ds, std::size_t tap, bool batch_stats = false,
                        std::size_t chunk = 1000);

/// Prior of the softmaxed state of one tap over the whole dataset (eval mode). Spatial
/// states take the softmax over channels at every location and average over locations.
std::vector<double> state_prior(const Network& net, const ManifoldDataset& ds, std::size_t tap, std::size_t chunk = 1000);

/// Fraction of tapped units, pooled over all taps, whose prior is below 1/(10K).
double dead_unit_fraction(const Network& net, const ManifoldDataset& ds);

/// Row-wise argmax.
std::vector<int> argmax_labels(const Tensor& probs);

struct ProbeConfig {
    std::size_t hidden = 200;
    std::size_t epochs = 30;
    double lr = 1e-3;
    std::size_t batch = 128;
    bool standardize = true;
    std::uint64_t seed = 0;
};

/// Trains a one-hidden-layer softmax classifier on frozen features and returns its
/// accuracy on the held-out set.
double linear_probe(const Tensor& train_features, const std::vector<int>& train_labels,
                    const Tensor& test_features, const std::vector<int>& test_labels, const ProbeConfig& cfg);

/// max over label permutations of mean(perm(pred) == truth). K <= 8.
double cluster_accuracy(const std::vector<int>& pred, const std::vector<int>& truth, std::size_t k);

}  // namespace nb
