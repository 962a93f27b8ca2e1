#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "neuralbayes/autodiff.hpp"
#include "neuralbayes/neural_bayes.hpp"
#include "neuralbayes/report.hpp"

namespace nb {

struct MimConfig {
    double alpha = 2.0;
    double beta = 4.0;
    double epsilon = 1e-7;
    bool use_scales = false;
    std::size_t pool_kernel = 2;
    std::size_t pool_stride = 2;
    /// Swap the cross-entropy prior penalty for the negative-entropy form.
    bool v1_prior = false;
    /// When positive, the prior inside the penalty blends a running average of past
    /// batch priors (weight = decay) with the live batch prior.
    double prior_ema_decay = 0.0;

    void validate() const;
};

/// (1/B) sum_i sum_k L_k log((L_k + guard) / (prior_k + guard)).
double mi_closed_form(const PosteriorBatch& p, double guard = 0.0);

/// -(1/B) sum L log<L + eps> + sum_k prior_k log<prior_k + eps>, <.> stop-gradient.
Var mim_v1_loss(Var posterior, double eps);
double mim_v1_loss(const PosteriorBatch& p, double eps = 1e-7);

/// sum_k prior_k log(prior_k + eps)
Var uniform_prior_penalty_v1(Var prior, double eps);
double uniform_prior_penalty_v1(const PriorEstimate& prior, double eps = 1e-7);

/// -sum_k [(1/K) log(prior_k + eps) + ((K-1)/K) log(1 - prior_k + eps)]
Var uniform_prior_penalty_v2(Var prior, double eps);
double uniform_prior_penalty_v2(const PriorEstimate& prior, double eps = 1e-7);

/// Multipliers of d prior_k / d theta in the gradients of the two prior penalties.
std::pair<double, double> prior_gradient_strength(double prior_k, std::size_t k);

/// Softmaxed hidden state. Spatial states hold one K-way posterior per location,
/// laid out as [B x (locations * K)].
struct CollectedState {
    std::string id;
    Var probs;
    std::size_t locations = 1;
    std::size_t k = 0;

    /// Posterior of one location as a checked PosteriorBatch.
    PosteriorBatch posterior(std::size_t location = 0) const;
};

using StateCollection = std::vector<CollectedState>;

StateCollection collect_states(const std::vector<Var>& states, const MimConfig& cfg);

/// The state R_c is attached to: the last tap, averaged to 1x1 when spatial. Not softmaxed.
Var smoothness_target(const std::vector<Var>& states);

struct MimLoss {
    Var total;
    ObjectiveReport report;
};

/// mean_states(entropy term) + (1 + alpha) mean_states(R_p) + beta rc.
/// `ema_priors` (one per state, used only when cfg.prior_ema_decay > 0) is updated in place.
MimLoss mim_v2_loss(const StateCollection& sc, const MimConfig& cfg, Var rc,
                    std::vector<Tensor>* ema_priors = nullptr);

}  // namespace nb
