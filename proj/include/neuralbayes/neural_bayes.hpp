#pragma once

#include <cstddef>
#include <utility>

#include "neuralbayes/autodiff.hpp"
#include "neuralbayes/tensor.hpp"

namespace nb {

/// B x K row-stochastic matrix of posteriors L(x_i).
class PosteriorBatch {
public:
    /// Validates entries in [0,1] and row sums within 1e-9 of 1.
    explicit PosteriorBatch(Tensor values);

    const Tensor& values() const { return values_; }
    std::size_t batch() const { return values_.rows(); }
    std::size_t k() const { return values_.cols(); }
    double operator()(std::size_t i, std::size_t k) const { return values_.at(i, k); }

private:
    Tensor values_;
};

/// Batch estimate of p(z = k).
class PriorEstimate {
public:
    PriorEstimate(Tensor values, std::size_t sample_count);

    const Tensor& values() const { return values_; }
    std::size_t sample_count() const { return sample_count_; }
    std::size_t k() const { return values_.size(); }
    double operator[](std::size_t k) const { return values_[k]; }

private:
    Tensor values_;
    std::size_t sample_count_;
};

/// Column means of the posterior.
PriorEstimate prior_estimate(const PosteriorBatch& p);

/// f_k = L_k / prior_k and fbar_k = (1 - L_k) / (1 - prior_k), each of length B.
/// Throws DegeneratePriorError unless prior_k lies strictly inside (0, 1).
std::pair<Tensor, Tensor> conditional_weights(const PosteriorBatch& p, const PriorEstimate& prior,
                                              std::size_t k);

/// L_k(x_i) / prior_k, the ratio p(x | z = k) / p(x).
Tensor density_ratio(const PosteriorBatch& p, const PriorEstimate& prior);

/// Differentiable prior: mean_rows of a [B x K] posterior.
Var prior_var(Var posterior);

}  // namespace nb
