#include "neuralbayes/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>

#include "neuralbayes/errors.hpp"

namespace nb {

void adam_step(const std::vector<Parameter*>& params, const GradientMap& grads, AdamState& st) {
    for (const Parameter* p : params) {
        auto it = grads.find(p->name);
        if (it == grads.end()) throw ArgumentError("no gradient for parameter " + p->name);
        if (it->second.shape() != p->value.shape()) {
            throw DimensionError("gradient of " + p->name + " has shape " + shape_str(it->second.shape()) +
                                 ", parameter has " + shape_str(p->value.shape()));
        }
    }
    ++st.step;
    const double t = static_cast<double>(st.step);
    const double c1 = 1.0 - std::pow(st.beta1, t);
    const double c2 = 1.0 - std::pow(st.beta2, t);
    for (Parameter* p : params) {
        const Tensor& g = grads.at(p->name);
        auto [mit, fresh_m] = st.m.try_emplace(p->name, p->value.shape());
        auto [vit, fresh_v] = st.v.try_emplace(p->name, p->value.shape());
        Tensor& m = mit->second;
        Tensor& v = vit->second;
        Tensor& w = p->value;
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (st.weight_decay > 0.0) w[i] -= st.lr * st.weight_decay * w[i];
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
            w[i] -= st.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + st.eps);
        }
    }
}

void AccumulationSchedule::validate() const {
    if (mbs == 0) throw ConfigError("mini-batch size must be positive");
    if (bs < mbs) throw ConfigError("batch size " + std::to_string(bs) + " is smaller than mini-batch size " + std::to_string(mbs));
    if (bs % mbs != 0) {
        throw ConfigError("batch size " + std::to_string(bs) + " is not a multiple of mini-batch size " + std::to_string(mbs));
    }
    if (epochs == 0) throw ConfigError("epochs must be positive");
}

std::string TrainLog::to_jsonl() const {
    std::string out;
    for (const auto& r : reports) out += to_json(r) + "\n";
    return out;
}

Objective mim_objective(const MimConfig& cfg) {
    cfg.validate();
    auto ema = std::make_shared<std::vector<Tensor>>();
    const double sigma = DmlConfig{}.noise_sigma;
    return [cfg, ema, sigma](Network& net, Tape& tape, const Tensor& batch, Rng& rng) {
        auto fr = net.forward(tape, tape.constant(batch), {Mode::Train, true});
        auto sc = collect_states(fr.states, cfg);
        Var rc = tape.constant(0.0);
        if (cfg.beta > 0.0) {
            const SmoothnessSample s = draw_smoothness_sample(batch, sigma, rng);
            ForwardFn f = [&net](Var x) {
                return smoothness_target(net.forward(x.tape(), x, {Mode::Train, false}).states);
            };
            rc = smoothness_penalty(smoothness_target(fr.states), f, batch, s);
        }
        auto l = mim_v2_loss(sc, cfg, rc, ema.get());
        return ObjectiveResult{l.total, l.report};
    };
}

Objective dml_objective(const DmlConfig& cfg) {
    cfg.validate();
    return [cfg](Network& net, Tape& tape, const Tensor& batch, Rng& rng) {
        Var out = net.forward(tape, tape.constant(batch), {Mode::Train, true}).output;
        if (out.value().rank() != 2 || out.value().cols() != cfg.k) {
            throw DimensionError("DML head must output [B x " + std::to_string(cfg.k) + "], got " + shape_str(out.shape()));
        }
        Var loss = cfg.k == 2 ? dml_binary_loss(column(out, 0), cfg.epsilon) : dml_multi_loss(out, cfg.epsilon);
        Var rc = tape.constant(0.0);
        if (cfg.beta > 0.0) {
            const SmoothnessSample s = draw_smoothness_sample(batch, cfg.noise_sigma, rng);
            ForwardFn f = [&net](Var x) { return net.forward(x.tape(), x, {Mode::Train, false}).output; };
            rc = smoothness_penalty(out, f, batch, s);
        }
        Var smooth = rc * cfg.beta;
        Var total = loss + smooth;
        ObjectiveReport r;
        r.mi_term = loss.value().item();
        r.smooth_term = smooth.value().item();
        r.total = total.value().item();
        return ObjectiveResult{total, r};
    };
}

TrainLog train_objective(Network& net, const ManifoldDataset& ds, const Objective& objective,
                         const AccumulationSchedule& sched, AdamState& opt, std::uint64_t seed,
                         const EpochCallback& on_epoch) {
    sched.validate();
    const auto start = std::chrono::steady_clock::now();
    const std::size_t n = ds.size();
    const std::size_t per_epoch = n / sched.mbs;
    if (per_epoch == 0) {
        throw ConfigError("dataset of " + std::to_string(n) + " samples holds no full mini-batch of " +
                          std::to_string(sched.mbs));
    }
    const std::size_t window = sched.window();
    Rng shuffle_rng(derive_seed(seed, 1));
    Rng loss_rng(derive_seed(seed, 2));
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);

    TrainLog log;
    log.seed = seed;
    GradientMap acc;
    ObjectiveReport window_report;
    std::size_t in_window = 0;
    const std::vector<Parameter*> params = net.parameters();
    std::vector<std::size_t> idx(sched.mbs);

    for (std::size_t epoch = 1; epoch <= sched.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i - 1);
            std::swap(perm[i - 1], perm[pick(shuffle_rng)]);
        }
        for (std::size_t b = 0; b < per_epoch; ++b) {
            std::copy_n(perm.begin() + b * sched.mbs, sched.mbs, idx.begin());
            const Tensor batch = gather_batch(ds, idx, net.sample_shape());
            GradientMap grads;
            ObjectiveReport rep;
            {
                Tape tape;
                auto res = objective(net, tape, batch, loss_rng);
                grads = tape.backward(res.loss);
                rep = res.report;
            }
            if (in_window == 0) {
                acc = std::move(grads);
            } else {
                for (auto& [name, g] : grads) {
                    Tensor& a = acc.at(name);
                    for (std::size_t j = 0; j < a.size(); ++j) a[j] += g[j];
                }
            }
            window_report.mi_term += rep.mi_term;
            window_report.prior_term += rep.prior_term;
            window_report.smooth_term += rep.smooth_term;
            window_report.total += rep.total;
            if (++in_window == window) {
                const double inv = 1.0 / static_cast<double>(window);
                if (window > 1) {
                    for (auto& [name, a] : acc) {
                        for (double& v : a.values()) v *= inv;
                    }
                }
                adam_step(params, acc, opt);
                window_report.mi_term *= inv;
                window_report.prior_term *= inv;
                window_report.smooth_term *= inv;
                window_report.total *= inv;
                window_report.step = opt.step;
                log.reports.push_back(window_report);
                window_report = {};
                in_window = 0;
            }
        }
        log.epochs_run = epoch;
        if (on_epoch && !on_epoch(epoch, net)) break;
    }
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return log;
}

Tensor gather_batch(const ManifoldDataset& ds, const std::vector<std::size_t>& indices, const Shape& sample_shape) {
    const std::size_t d = ds.dim();
    if (shape_size(sample_shape) != d) {
        throw DimensionError("sample shape " + shape_str(sample_shape) + " does not match " + std::to_string(d) +
                             " features");
    }
    Shape shape{indices.size()};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    Tensor out(shape);
    for (std::size_t r = 0; r < indices.size(); ++r) {
        std::copy_n(ds.points.data() + indices[r] * d, d, out.data() + r * d);
    }
    return out;
}

namespace {

template <class F>
Tensor chunked(const ManifoldDataset& ds, const Shape& sample_shape, std::size_t chunk, F eval) {
    if (chunk == 0) throw ArgumentError("chunk must be positive");
    const std::size_t n = ds.size();
    std::vector<double> values;
    std::size_t width = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t end = std::min(n, start + chunk);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor out = eval(gather_batch(ds, idx, sample_shape));
        width = out.size() / idx.size();
        values.insert(values.end(), out.values().begin(), out.values().end());
    }
    return Tensor(Shape{n, width}, std::move(values));
}

}  // namespace

Tensor predict_all(const Network& net, const ManifoldDataset& ds, std::size_t chunk) {
    return chunked(ds, net.sample_shape(), chunk, [&](const Tensor& x) { return net.predict(x); });
}

Tensor extract_features(const Network& net, const ManifoldDataset& ds, std::size_t tap, bool batch_stats,
                        std::size_t chunk) {
    if (tap >= net.taps().size()) {
        throw ArgumentError("tap " + std::to_string(tap) + " out of range; network has " +
                            std::to_string(net.taps().size()) + " taps");
    }
    if (!batch_stats) {
        return chunked(ds, net.sample_shape(), chunk, [&](const Tensor& x) { return net.predict_states(x)[tap]; });
    }
    Network copy = net;
    return chunked(ds, net.sample_shape(), chunk, [&](const Tensor& x) {
        Tape tape;
        return copy.forward(tape, tape.constant(x), {Mode::Train, false}).states[tap].value();
    });
}

std::vector<double> state_prior(const Network& net, const ManifoldDataset& ds, std::size_t tap, std::size_t chunk) {
    if (tap >= net.taps().size()) throw ArgumentError("tap " + std::to_string(tap) + " out of range");
    if (chunk == 0) throw ArgumentError("chunk must be positive");
    std::vector<double> prior;
    std::size_t count = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < ds.size(); start += chunk) {
        idx.resize(std::min(ds.size(), start + chunk) - start);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor h = net.predict_states(gather_batch(ds, idx, net.sample_shape()))[tap];
        const std::size_t c = h.shape()[1];
        const std::size_t loc = h.size() / (h.shape()[0] * c);  // 1 for [B x C], H*W for [B x C x H x W]
        if (prior.empty()) prior.assign(c, 0.0);
        std::vector<double> e(c);
        for (std::size_t b = 0; b < h.shape()[0]; ++b) {
            for (std::size_t l = 0; l < loc; ++l) {
                const double* base = h.data() + b * c * loc + l;
                double m = -INFINITY, s = 0.0;
                for (std::size_t j = 0; j < c; ++j) m = std::max(m, base[j * loc]);
                for (std::size_t j = 0; j < c; ++j) s += (e[j] = std::exp(base[j * loc] - m));
                for (std::size_t j = 0; j < c; ++j) prior[j] += e[j] / s;
                ++count;
            }
        }
    }
    for (double& p : prior) p /= static_cast<double>(count);
    return prior;
}

double dead_unit_fraction(const Network& net, const ManifoldDataset& ds) {
    std::size_t dead = 0, total = 0;
    for (std::size_t t = 0; t < net.taps().size(); ++t) {
        const std::vector<double> prior = state_prior(net, ds, t);
        for (double p : prior) dead += p < 1.0 / (10.0 * static_cast<double>(prior.size()));
        total += prior.size();
    }
    if (total == 0) throw ArgumentError("network has no taps");
    return static_cast<double>(dead) / static_cast<double>(total);
}

std::vector<int> argmax_labels(const Tensor& probs) {
    if (probs.rank() != 2) throw DimensionError("argmax_labels expects [N x K]");
    std::vector<int> out(probs.rows());
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < probs.cols(); ++k) {
            if (probs.at(i, k) > probs.at(i, best)) best = k;
        }
        out[i] = static_cast<int>(best);
    }
    return out;
}

double linear_probe(const Tensor& train_features, const std::vector<int>& train_labels,
                    const Tensor& test_features, const std::vector<int>& test_labels, const ProbeConfig& cfg) {
    if (train_features.rank() != 2 || test_features.rank() != 2 || train_features.cols() != test_features.cols()) {
        throw DimensionError("probe features must be [N x d] with matching d");
    }
    if (train_features.rows() != train_labels.size() || test_features.rows() != test_labels.size()) {
        throw ArgumentError("probe label count differs from feature count");
    }
    if (cfg.batch == 0 || cfg.hidden == 0) throw ArgumentError("probe batch and hidden size must be positive");
    int classes = 0;
    for (int y : train_labels) {
        if (y < 0) throw ArgumentError("negative label");
        classes = std::max(classes, y + 1);
    }
    for (int y : test_labels) classes = std::max(classes, y + 1);

    Tensor xtr = train_features, xte = test_features;
    if (cfg.standardize) {
        const Standardizer s = fit_standardizer(train_features);
        xtr = apply_standardizer(s, train_features);
        xte = apply_standardizer(s, test_features);
    }
    const std::size_t n = xtr.rows(), d = xtr.cols();
    Network clf = make_mlp({d, {cfg.hidden}, false, static_cast<std::size_t>(classes), false}, derive_seed(cfg.seed, 11));
    AdamState opt;
    opt.lr = cfg.lr;
    const auto params = clf.parameters();
    Rng rng(derive_seed(cfg.seed, 12));
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<int> yb;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i - 1);
            std::swap(perm[i - 1], perm[pick(rng)]);
        }
        for (std::size_t start = 0; start < n; start += cfg.batch) {
            const std::size_t m = std::min(cfg.batch, n - start);
            Tensor xb(Shape{m, d});
            yb.resize(m);
            for (std::size_t r = 0; r < m; ++r) {
                std::copy_n(xtr.data() + perm[start + r] * d, d, xb.data() + r * d);
                yb[r] = train_labels[perm[start + r]];
            }
            Tape tape;
            Var logits = clf.forward(tape, tape.constant(std::move(xb)), {}).output;
            adam_step(params, tape.backward(softmax_cross_entropy(logits, yb)), opt);
        }
    }
    const auto pred = argmax_labels(clf.predict(xte));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == test_labels[i];
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double cluster_accuracy(const std::vector<int>& pred, const std::vector<int>& truth, std::size_t k) {
    if (k > 8) throw ArgumentError("cluster_accuracy supports K <= 8");
    if (k == 0) throw ArgumentError("K must be positive");
    if (pred.size() != truth.size() || pred.empty()) throw ArgumentError("prediction and truth sizes differ or are empty");
    std::vector<std::size_t> conf(k * k, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] < 0 || truth[i] < 0 || static_cast<std::size_t>(pred[i]) >= k ||
            static_cast<std::size_t>(truth[i]) >= k) {
            throw ArgumentError("label outside [0, K)");
        }
        ++conf[static_cast<std::size_t>(pred[i]) * k + static_cast<std::size_t>(truth[i])];
    }
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::size_t best = 0;
    do {
        std::size_t s = 0;
        for (std::size_t c = 0; c < k; ++c) s += conf[c * k + perm[c]];
        best = std::max(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return static_cast<double>(best) / static_cast<double>(pred.size());
}

}  // namespace nb
