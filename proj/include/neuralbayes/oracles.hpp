#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "neuralbayes/autodiff.hpp"
#include "neuralbayes/neural_bayes.hpp"
#include "neuralbayes/nn.hpp"

// Brute-force references. Nothing here calls the objective implementations; values
// are recomputed from raw storage with plain loops.

namespace nb::oracles {

/// MI of the joint table p(x_i, k) = L_k(x_i) / B, zero atoms skipped.
double brute_force_mi(const PosteriorBatch& p);

/// (1/2) KL(w0 || m) + (1/2) KL(w1 || m), m = (w0 + w1) / 2. Both inputs must be
/// nonnegative and sum to 1 within 1e-9.
double js_divergence_discrete(const Tensor& w0, const Tensor& w1);

using ScalarFn = std::function<double()>;

/// Central differences of `f` with respect to every entry of every parameter.
/// Parameters are restored afterwards. Throws DomainError naming the coordinate
/// when a perturbed evaluation is not finite.
GradientMap finite_diff_grad(const ScalarFn& f, const std::vector<Parameter*>& params, double h = 1e-5);

/// max_i |a_i - b_i| / max(|b_i|, floor_rel * max_j |b_j|, 1e-300). Zero when both are all zero.
double max_rel_diff(const GradientMap& analytic, const GradientMap& reference, double floor_rel = 1e-3);

enum class StopBranch {
    Correct,  // stop the log argument, as in the simplified objective
    Wrong,    // stop the live factor instead (negative control)
};

struct Theorem1Case {
    std::size_t case_id = 0;
    double max_rel_diff = 0.0;
    bool pass = false;
};

/// Random softmax MLP without batch norm (input width, hidden widths, K), biases ~ N(0, 0.1^2).
Network random_softmax_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t k, std::uint64_t seed);

/// Analytic gradient of the stop-gradient objective versus central differences of
/// the fully live -MI objective, evaluated full batch. Throws DomainError if a
/// posterior entry is zero.
double theorem1_check(Network& net, const Tensor& batch, StopBranch branch = StopBranch::Correct, double h = 1e-5);

/// Per row, the smallest |pre-activation| entering any ReLU. MLPs built from dense,
/// relu and softmax layers only.
std::vector<double> relu_kink_distance(const Network& net, const Tensor& batch);

inline constexpr double kKinkMargin = 1e-3;

/// Case `id` of a seeded sweep: widths 2-32, depth 1-3, K 2-8, B 2-64. Batch rows
/// closer than kKinkMargin to a ReLU kink are redrawn.
Theorem1Case theorem1_case(std::uint64_t seed, std::size_t id, StopBranch branch = StopBranch::Correct,
                           double tolerance = 1e-4);

}  // namespace nb::oracles
