#pragma once

#include <cstddef>
#include <functional>

#include "neuralbayes/autodiff.hpp"
#include "neuralbayes/neural_bayes.hpp"
#include "neuralbayes/random.hpp"

namespace nb {

struct DmlConfig {
    std::size_t k = 2;
    double beta = 1.0;
    double epsilon = 1e-7;
    double noise_sigma = 0.1;

    void validate() const;
};

/// Jensen-Shannon form with the + log 2 offset, in [0, log 2]. `l` holds L(x_i) for
/// the first partition ([B] or [B x 1]). The prior defaults to the batch mean.
double dml_binary_objective(const Tensor& l);
double dml_binary_objective(const Tensor& l, double prior);

/// 0.5 mean[f1 log(1 + f0/f1)] + 0.5 mean[f0 log(1 + f1/f0)] with
/// f1 = L/prior + eps and f0 = (1 - L)/(1 - prior) + eps; the prior is the live batch mean.
Var dml_binary_loss(Var l, double eps);
double dml_binary_loss(const Tensor& l, double eps = 1e-7);
/// Same loss with a fixed prior in place of the batch mean.
double dml_binary_loss(const Tensor& l, double prior, double eps);

/// (1/K) sum_k [binary loss of partition k against the rest] - log 2.
Var dml_multi_loss(Var posterior, double eps);
double dml_multi_loss(const PosteriorBatch& p, double eps = 1e-7);

/// Unit directions in the span of the batch and one scale for the whole batch.
struct SmoothnessSample {
    Tensor directions;  // [B x n]
    double zeta = 0.0;
};

/// Draws v_i ~ N(0, I_B), sets delta_i = sum_j v_ij x_j and normalizes it;
/// zeta ~ N(0, sigma^2) redrawn while |zeta| < 1e-4.
SmoothnessSample draw_smoothness_sample(const Tensor& batch, double noise_sigma, Rng& rng);

using ForwardFn = std::function<Var(Var)>;

/// (1/B) sum_i ||f(x_i) - f(x_i + zeta d_i)||^2 / zeta^2 where `clean` = f(batch).
Var smoothness_penalty(Var clean, const ForwardFn& f, const Tensor& batch, const SmoothnessSample& s);
Var smoothness_penalty(const ForwardFn& f, Tape& tape, const Tensor& batch, double noise_sigma, Rng& rng);

}  // namespace nb
