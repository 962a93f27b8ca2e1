#include "neuralbayes/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "neuralbayes/errors.hpp"
#include "neuralbayes/mim.hpp"
#include "neuralbayes/random.hpp"

namespace nb::oracles {

double brute_force_mi(const PosteriorBatch& p) {
    const std::size_t b = p.batch(), k = p.k();
    const double px = 1.0 / static_cast<double>(b);
    // Joint table and both marginals, summed in column-major order.
    std::vector<double> joint(b * k);
    std::vector<double> pz(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < b; ++i) {
            joint[j * b + i] = p(i, j) * px;
            pz[j] += joint[j * b + i];
        }
    }
    double mi = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < b; ++i) {
            const double pxz = joint[j * b + i];
            if (pxz == 0.0) continue;
            mi += pxz * std::log(pxz / (px * pz[j]));
        }
    }
    return mi;
}

namespace {

void check_simplex(const Tensor& w, const char* what) {
    double s = 0.0;
    for (double v : w.values()) {
        if (!(v >= 0.0)) throw DomainError(std::string(what) + " has a negative entry");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw DomainError(std::string(what) + " does not sum to 1");
}

}  // namespace

double js_divergence_discrete(const Tensor& w0, const Tensor& w1) {
    if (w0.size() != w1.size()) throw DimensionError("js_divergence_discrete: sizes differ");
    check_simplex(w0, "w0");
    check_simplex(w1, "w1");
    double kl0 = 0.0, kl1 = 0.0;
    for (std::size_t i = 0; i < w0.size(); ++i) {
        const double m = 0.5 * (w0[i] + w1[i]);
        if (w0[i] > 0.0) kl0 += w0[i] * std::log(w0[i] / m);
        if (w1[i] > 0.0) kl1 += w1[i] * std::log(w1[i] / m);
    }
    return 0.5 * kl0 + 0.5 * kl1;
}

GradientMap finite_diff_grad(const ScalarFn& f, const std::vector<Parameter*>& params, double h) {
    if (!(h > 0.0)) throw ArgumentError("finite difference step must be positive");
    GradientMap out;
    for (Parameter* p : params) {
        Tensor g(p->value.shape());
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + h;
            const double up = f();
            p->value[i] = saved - h;
            const double down = f();
            p->value[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw DomainError("non-finite loss when perturbing " + p->name + "[" + std::to_string(i) + "]");
            }
            g[i] = (up - down) / (2.0 * h);
        }
        out.emplace(p->name, std::move(g));
    }
    return out;
}

double max_rel_diff(const GradientMap& analytic, const GradientMap& reference, double floor_rel) {
    double scale = 0.0;
    for (const auto& [name, t] : reference) {
        for (double v : t.values()) scale = std::max(scale, std::abs(v));
    }
    double worst = 0.0;
    for (const auto& [name, ref] : reference) {
        auto it = analytic.find(name);
        if (it == analytic.end()) throw ArgumentError("analytic gradient lacks " + name);
        if (it->second.size() != ref.size()) throw DimensionError("gradient sizes differ for " + name);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            const double diff = std::abs(it->second[i] - ref[i]);
            if (diff == 0.0) continue;
            const double denom = std::max({std::abs(ref[i]), floor_rel * scale, 1e-300});
            worst = std::max(worst, diff / denom);
        }
    }
    return worst;
}

Network random_softmax_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t k, std::uint64_t seed) {
    Network net = make_mlp({in, hidden, false, k, true}, seed);
    // Zero biases put samples whose previous ReLUs are all off exactly on a kink,
    // where central differences straddle two branches.
    Rng rng(derive_seed(seed, 77));
    std::normal_distribution<double> noise(0.0, 0.1);
    for (Parameter* p : net.parameters()) {
        if (p->name.ends_with(".bias")) {
            for (double& v : p->value.values()) v = noise(rng);
        }
    }
    return net;
}

namespace {

Var wrong_branch_loss(Var l) {
    const double b = static_cast<double>(l.shape()[0]);
    Var prior = mean_rows(l);
    Var cond = sum_all(stop_gradient(l) * log(l)) * (-1.0 / b);
    return cond + sum_all(stop_gradient(prior) * log(prior));
}

}  // namespace

double theorem1_check(Network& net, const Tensor& batch, StopBranch branch, double h) {
    const Tensor probs = net.predict(batch);
    for (double v : probs.values()) {
        if (!(v > 0.0)) throw DomainError("posterior entry is zero; the unguarded logarithm is undefined");
    }
    GradientMap analytic;
    {
        Tape tape;
        Var l = net.forward(tape, tape.constant(batch), {Mode::Eval, false}).output;
        Var loss = branch == StopBranch::Correct ? mim_v1_loss(l, 0.0) : wrong_branch_loss(l);
        analytic = tape.backward(loss);
    }
    const auto live = [&]() { return -brute_force_mi(PosteriorBatch(net.predict(batch))); };
    const GradientMap reference = finite_diff_grad(live, net.parameters(), h);
    return max_rel_diff(analytic, reference);
}

std::vector<double> relu_kink_distance(const Network& net, const Tensor& batch) {
    if (batch.rank() != 2) throw DimensionError("relu_kink_distance expects a [B x n] batch");
    std::vector<double> out(batch.rows(), std::numeric_limits<double>::infinity());
    for (std::size_t r = 0; r < batch.rows(); ++r) {
        std::vector<double> h(batch.cols());
        for (std::size_t j = 0; j < h.size(); ++j) h[j] = batch.at(r, j);
        for (const auto& layer : net.layers()) {
            if (const auto* d = std::get_if<DenseLayer>(&layer)) {
                const Tensor& w = d->weight.value;
                std::vector<double> z(w.rows());
                for (std::size_t o = 0; o < w.rows(); ++o) {
                    double acc = d->bias.value[o];
                    for (std::size_t j = 0; j < w.cols(); ++j) acc += w.at(o, j) * h[j];
                    z[o] = acc;
                }
                h = std::move(z);
            } else if (std::holds_alternative<ReluLayer>(layer)) {
                for (double& v : h) {
                    out[r] = std::min(out[r], std::abs(v));
                    v = std::max(v, 0.0);
                }
            } else if (!std::holds_alternative<SoftmaxLayer>(layer)) {
                throw ArgumentError("relu_kink_distance supports dense, relu and softmax layers only");
            }
        }
    }
    return out;
}

Theorem1Case theorem1_case(std::uint64_t seed, std::size_t id, StopBranch branch, double tolerance) {
    Rng rng(derive_seed(seed, 1000 + id));
    auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
    const std::size_t in = pick(2, 32), depth = pick(1, 3), k = pick(2, 8), b = pick(2, 64);
    std::vector<std::size_t> hidden(depth);
    for (auto& w : hidden) w = pick(2, 32);
    Network net = random_softmax_mlp(in, hidden, k, rng());
    Tensor x(Shape{b, in});
    for (double& v : x.values()) v = standard_normal(rng);
    // Central differences are meaningless across a ReLU kink, so rows with a
    // pre-activation near zero are redrawn.
    for (int attempt = 0;; ++attempt) {
        const auto dist = relu_kink_distance(net, x);
        bool clean = true;
        for (std::size_t r = 0; r < b; ++r) {
            if (dist[r] >= kKinkMargin) continue;
            clean = false;
            for (std::size_t j = 0; j < in; ++j) x.at(r, j) = standard_normal(rng);
        }
        if (clean) break;
        if (attempt == 1000) throw GenerationError("could not draw a batch away from ReLU kinks");
    }
    Theorem1Case out;
    out.case_id = id;
    out.max_rel_diff = theorem1_check(net, x, branch);
    out.pass = out.max_rel_diff <= tolerance;
    return out;
}

}  // namespace nb::oracles
