#include "neuralbayes/dml.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "neuralbayes/errors.hpp"

namespace nb {

void DmlConfig::validate() const {
    if (k < 2) throw ConfigError("DML needs at least two partitions");
    if (!(beta >= 0.0)) throw ConfigError("beta must be nonnegative");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    if (!(noise_sigma > 0.0)) throw ConfigError("noise_sigma must be positive");
}

namespace {

void check_l(const Tensor& l) {
    if (!(l.rank() == 1 || (l.rank() == 2 && l.cols() == 1))) {
        throw DimensionError("expected L as [B] or [B x 1], got " + shape_str(l.shape()));
    }
    for (double v : l.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError("L values must lie in [0,1]");
    }
}

double batch_mean(const Tensor& l) {
    double s = 0.0;
    for (double v : l.values()) s += v;
    return s / static_cast<double>(l.size());
}

double xlog_ratio(double a, double b) {
    return a == 0.0 ? 0.0 : a * std::log(a / b);
}

}  // namespace

double dml_binary_objective(const Tensor& l) {
    check_l(l);
    return dml_binary_objective(l, batch_mean(l));
}

double dml_binary_objective(const Tensor& l, double prior) {
    check_l(l);
    if (!(prior > 0.0 && prior < 1.0)) throw DegeneratePriorError("prior must lie in (0,1)");
    double s1 = 0.0, s0 = 0.0;
    for (double v : l.values()) {
        const double f1 = v / prior, f0 = (1.0 - v) / (1.0 - prior);
        s1 += xlog_ratio(f1, f1 + f0);
        s0 += xlog_ratio(f0, f1 + f0);
    }
    const double n = static_cast<double>(l.size());
    return 0.5 * s1 / n + 0.5 * s0 / n + std::numbers::ln2;
}

namespace {

Var binary_loss_with_prior(Var l, Var prior, double eps) {
    Var f1 = l / prior + eps;
    Var f0 = (1.0 - l) / (1.0 - prior) + eps;
    Var a = mean_all(f1 * log(1.0 + f0 / f1));
    Var b = mean_all(f0 * log(1.0 + f1 / f0));
    return (a + b) * 0.5;
}

}  // namespace

Var dml_binary_loss(Var l, double eps) {
    if (l.value().rank() == 2) {
        if (l.value().cols() != 1) throw DimensionError("dml_binary_loss expects [B] or [B x 1]");
        l = reshape(l, Shape{l.shape()[0]});
    }
    if (l.value().rank() != 1) throw DimensionError("dml_binary_loss expects [B] or [B x 1]");
    if (l.shape()[0] < 2) throw ArgumentError("dml_binary_loss needs a batch of at least 2");
    Var prior = mean_all(l);
    const double p = prior.value().item();
    if (!(p > 0.0 && p < 1.0)) throw DegeneratePriorError("batch prior " + std::to_string(p) + " outside (0,1)");
    return binary_loss_with_prior(l, prior, eps);
}

double dml_binary_loss(const Tensor& l, double eps) {
    check_l(l);
    Tape tape;
    return dml_binary_loss(tape.constant(l), eps).value().item();
}

double dml_binary_loss(const Tensor& l, double prior, double eps) {
    check_l(l);
    if (!(prior > 0.0 && prior < 1.0)) throw DegeneratePriorError("prior must lie in (0,1)");
    Tape tape;
    Var lv = tape.constant(l.reshaped(Shape{l.size()}));
    return binary_loss_with_prior(lv, tape.constant(prior), eps).value().item();
}

Var dml_multi_loss(Var posterior, double eps) {
    if (posterior.value().rank() != 2) throw DimensionError("dml_multi_loss expects [B x K]");
    const std::size_t k = posterior.value().cols();
    if (k < 2) throw ArgumentError("dml_multi_loss needs K >= 2");
    const Tensor prior = mean_rows(posterior).value();
    for (std::size_t j = 0; j < k; ++j) {
        if (!(prior[j] > 0.0 && prior[j] < 1.0)) {
            throw DegeneratePriorError("prior of partition " + std::to_string(j) + " outside (0,1)");
        }
    }
    Var total = posterior.tape().constant(0.0);
    for (std::size_t j = 0; j < k; ++j) total = total + dml_binary_loss(column(posterior, j), eps);
    return total * (1.0 / static_cast<double>(k)) - std::numbers::ln2;
}

double dml_multi_loss(const PosteriorBatch& p, double eps) {
    Tape tape;
    return dml_multi_loss(tape.constant(p.values()), eps).value().item();
}

SmoothnessSample draw_smoothness_sample(const Tensor& batch, double noise_sigma, Rng& rng) {
    if (batch.rank() < 2) throw DimensionError("smoothness penalty needs a batch of samples");
    const std::size_t b = batch.dim(0), n = batch.size() / b;
    if (b < 2) throw ArgumentError("smoothness penalty needs a batch of at least 2");
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    RowMat v(b, b);
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        for (Eigen::Index j = 0; j < v.cols(); ++j) v(i, j) = standard_normal(rng);
    }
    SmoothnessSample s;
    s.directions = Tensor(batch.shape());
    Eigen::Map<const RowMat> x(batch.data(), b, n);
    Eigen::Map<RowMat> d(s.directions.data(), b, n);
    d.noalias() = v * x;
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
        const double norm = d.row(i).norm();
        if (!(norm > 0.0)) throw ArgumentError("perturbation direction undefined for an all-zero batch");
        d.row(i) /= norm;
    }
    std::normal_distribution<double> z(0.0, noise_sigma);
    do {
        s.zeta = z(rng);
    } while (std::abs(s.zeta) < 1e-4);
    return s;
}

Var smoothness_penalty(Var clean, const ForwardFn& f, const Tensor& batch, const SmoothnessSample& s) {
    if (s.directions.shape() != batch.shape()) throw DimensionError("smoothness sample does not match the batch");
    Tensor moved = batch;
    for (std::size_t i = 0; i < moved.size(); ++i) moved[i] += s.zeta * s.directions[i];
    Var noisy = f(clean.tape().constant(std::move(moved)));
    if (noisy.shape() != clean.shape()) throw DimensionError("forward function changed output shape");
    Var diff = clean - noisy;
    const double b = static_cast<double>(batch.dim(0));
    return sum_all(diff * diff) * (1.0 / (b * s.zeta * s.zeta));
}

Var smoothness_penalty(const ForwardFn& f, Tape& tape, const Tensor& batch, double noise_sigma, Rng& rng) {
    SmoothnessSample s = draw_smoothness_sample(batch, noise_sigma, rng);
    Var clean = f(tape.constant(batch));
    return smoothness_penalty(clean, f, batch, s);
}

}  // namespace nb
