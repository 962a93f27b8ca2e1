#include "neuralbayes/neural_bayes.hpp"

#include <cmath>
#include <sstream>

#include "neuralbayes/errors.hpp"

namespace nb {

PosteriorBatch::PosteriorBatch(Tensor values) : values_(std::move(values)) {
    if (values_.rank() != 2) throw DimensionError("posterior batch must be B x K, got " + shape_str(values_.shape()));
    for (std::size_t i = 0; i < values_.rows(); ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < values_.cols(); ++k) {
            const double v = values_.at(i, k);
            if (!(v >= 0.0 && v <= 1.0)) {
                std::ostringstream os;
                os << "posterior entry (" << i << "," << k << ") = " << v << " outside [0,1]";
                throw DomainError(os.str());
            }
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-9) {
            std::ostringstream os;
            os << "posterior row " << i << " sums to " << s;
            throw DomainError(os.str());
        }
    }
}

PriorEstimate::PriorEstimate(Tensor values, std::size_t sample_count)
    : values_(std::move(values)), sample_count_(sample_count) {
    if (values_.rank() != 1) throw DimensionError("prior must be a vector");
    double s = 0.0;
    for (double v : values_.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError("prior entry outside [0,1]");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw DomainError("prior entries do not sum to 1");
}

PriorEstimate prior_estimate(const PosteriorBatch& p) {
    const std::size_t b = p.batch(), kk = p.k();
    Tensor prior(Shape{kk});
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t k = 0; k < kk; ++k) prior[k] += p(i, k);
    }
    for (std::size_t k = 0; k < kk; ++k) prior[k] /= static_cast<double>(b);
    return PriorEstimate(std::move(prior), b);
}

std::pair<Tensor, Tensor> conditional_weights(const PosteriorBatch& p, const PriorEstimate& prior,
                                              std::size_t k) {
    if (k >= p.k() || prior.k() != p.k()) throw DimensionError("conditional_weights: partition index or prior size");
    const double pk = prior[k];
    if (!(pk > 0.0 && pk < 1.0)) {
        throw DegeneratePriorError("prior of partition " + std::to_string(k) + " is " + std::to_string(pk) +
                                   ", must lie in (0,1)");
    }
    Tensor f(Shape{p.batch()}), fbar(Shape{p.batch()});
    for (std::size_t i = 0; i < p.batch(); ++i) {
        f[i] = p(i, k) / pk;
        fbar[i] = (1.0 - p(i, k)) / (1.0 - pk);
    }
    return {std::move(f), std::move(fbar)};
}

Tensor density_ratio(const PosteriorBatch& p, const PriorEstimate& prior) {
    if (prior.k() != p.k()) throw DimensionError("density_ratio: prior size");
    for (std::size_t k = 0; k < p.k(); ++k) {
        if (prior[k] == 0.0) throw DegeneratePriorError("prior of partition " + std::to_string(k) + " is zero");
    }
    Tensor r(Shape{p.batch(), p.k()});
    for (std::size_t i = 0; i < p.batch(); ++i) {
        for (std::size_t k = 0; k < p.k(); ++k) r.at(i, k) = p(i, k) / prior[k];
    }
    return r;
}

Var prior_var(Var posterior) {
    if (posterior.value().rank() != 2) throw DimensionError("prior_var expects B x K");
    return mean_rows(posterior);
}

}  // namespace nb
