#include "neuralbayes/mim.hpp"

#include <algorithm>
#include <cmath>

#include "neuralbayes/errors.hpp"

namespace nb {

void MimConfig::validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be nonnegative");
    if (!(beta >= 0.0)) throw ConfigError("beta must be nonnegative");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    if (!(prior_ema_decay >= 0.0 && prior_ema_decay < 1.0)) throw ConfigError("prior_ema_decay must lie in [0,1)");
    if (pool_kernel == 0 || pool_stride == 0) throw ConfigError("pool kernel and stride must be positive");
}

double mi_closed_form(const PosteriorBatch& p, double guard) {
    const PriorEstimate prior = prior_estimate(p);
    double total = 0.0;
    for (std::size_t i = 0; i < p.batch(); ++i) {
        for (std::size_t k = 0; k < p.k(); ++k) {
            const double l = p(i, k);
            if (l == 0.0 && guard == 0.0) continue;
            total += l * std::log((l + guard) / (prior[k] + guard));
        }
    }
    return total / static_cast<double>(p.batch());
}

Var mim_v1_loss(Var posterior, double eps) {
    const double b = static_cast<double>(posterior.shape()[0]);
    Var prior = prior_var(posterior);
    Var cond = sum_all(posterior * log(stop_gradient(posterior), eps)) * (-1.0 / b);
    return cond + sum_all(prior * log(stop_gradient(prior), eps));
}

double mim_v1_loss(const PosteriorBatch& p, double eps) {
    Tape tape;
    return mim_v1_loss(tape.constant(p.values()), eps).value().item();
}

Var uniform_prior_penalty_v1(Var prior, double eps) {
    return sum_all(prior * log(prior, eps));
}

double uniform_prior_penalty_v1(const PriorEstimate& prior, double eps) {
    Tape tape;
    return uniform_prior_penalty_v1(tape.constant(prior.values()), eps).value().item();
}

Var uniform_prior_penalty_v2(Var prior, double eps) {
    const double k = static_cast<double>(prior.value().size());
    Var a = sum_all(log(prior, eps)) * (1.0 / k);
    Var b = sum_all(log(1.0 - prior, eps)) * ((k - 1.0) / k);
    return -(a + b);
}

double uniform_prior_penalty_v2(const PriorEstimate& prior, double eps) {
    Tape tape;
    return uniform_prior_penalty_v2(tape.constant(prior.values()), eps).value().item();
}

std::pair<double, double> prior_gradient_strength(double prior_k, std::size_t k) {
    if (!(prior_k > 0.0 && prior_k < 1.0)) throw DomainError("prior must lie in (0,1)");
    if (k < 2) throw ArgumentError("need at least two states");
    const double kk = static_cast<double>(k);
    const double v1 = std::log(prior_k);
    const double v2 = -(1.0 / kk) * (1.0 / prior_k - (kk - 1.0) / (1.0 - prior_k));
    return {v1, v2};
}

PosteriorBatch CollectedState::posterior(std::size_t location) const {
    if (location >= locations) throw ArgumentError("location out of range");
    const Tensor& v = probs.value();
    const std::size_t b = v.rows();
    Tensor out(Shape{b, k});
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < k; ++j) out.at(i, j) = v.at(i, location * k + j);
    }
    return PosteriorBatch(std::move(out));
}

namespace {

CollectedState softmax_state(const std::string& id, Var h) {
    const auto& s = h.shape();
    if (s.size() == 2) return {id, softmax_rows(h), 1, s[1]};
    if (s.size() != 4) throw DimensionError("state " + id + " must be [B x K] or [B x C x H x W]");
    const std::size_t b = s[0], c = s[1], locations = s[2] * s[3];
    Var rows = reshape(channels_last(h), Shape{b * locations, c});
    return {id, reshape(softmax_rows(rows), Shape{b, locations * c}), locations, c};
}

}  // namespace

StateCollection collect_states(const std::vector<Var>& states, const MimConfig& cfg) {
    StateCollection out;
    for (std::size_t i = 0; i < states.size(); ++i) {
        out.push_back(softmax_state("h" + std::to_string(i), states[i]));
    }
    if (cfg.use_scales) {
        for (std::size_t i = 0; i < states.size(); ++i) {
            if (states[i].value().rank() != 4) continue;
            Var pooled = avg_pool2d(states[i], cfg.pool_kernel, cfg.pool_stride);
            out.push_back(softmax_state("h" + std::to_string(i) + "_pooled", pooled));
        }
    }
    return out;
}

Var smoothness_target(const std::vector<Var>& states) {
    if (states.empty()) throw ArgumentError("network exports no hidden states");
    Var h = states.back();
    if (h.value().rank() == 4) {
        const auto& s = h.shape();
        const std::size_t side = std::max(s[2], s[3]);
        h = reshape(avg_pool2d(h, side, side), Shape{s[0], s[1]});
    }
    return h;
}

MimLoss mim_v2_loss(const StateCollection& sc, const MimConfig& cfg, Var rc, std::vector<Tensor>* ema_priors) {
    cfg.validate();
    if (sc.empty()) throw ArgumentError("mim_v2_loss: empty state collection");
    const bool ema = cfg.prior_ema_decay > 0.0 && ema_priors != nullptr;
    if (ema && !ema_priors->empty() && ema_priors->size() != sc.size()) {
        throw ArgumentError("prior history does not match the state collection");
    }
    Tape& tape = sc.front().probs.tape();
    const double n_states = static_cast<double>(sc.size());

    Var ent = tape.constant(0.0);
    Var rp = tape.constant(0.0);
    for (std::size_t s = 0; s < sc.size(); ++s) {
        const auto& st = sc[s];
        const double b = static_cast<double>(st.probs.shape()[0]);
        const double norm = b * static_cast<double>(st.locations);
        ent = ent + sum_all(st.probs * log(stop_gradient(st.probs), cfg.epsilon)) * (-1.0 / norm);

        // The prior of each location is the batch mean of its K-block.
        Var prior = mean_rows(st.probs);
        if (ema) {
            const double d = cfg.prior_ema_decay;
            if (ema_priors->size() < sc.size()) ema_priors->push_back(prior.value());
            Tensor& hist = (*ema_priors)[s];
            prior = prior * (1.0 - d) + tape.constant(hist) * d;
            hist = prior.value();
        }
        Var pen;
        if (cfg.v1_prior) {
            pen = sum_all(prior * log(prior, cfg.epsilon));
        } else {
            const double k = static_cast<double>(st.k);
            pen = -(sum_all(log(prior, cfg.epsilon)) * (1.0 / k) +
                    sum_all(log(1.0 - prior, cfg.epsilon)) * ((k - 1.0) / k));
        }
        rp = rp + pen * (1.0 / static_cast<double>(st.locations));
    }
    Var mi_term = ent * (1.0 / n_states);
    Var prior_term = rp * ((1.0 + cfg.alpha) / n_states);
    Var smooth_term = rc * cfg.beta;
    Var total = mi_term + prior_term + smooth_term;

    MimLoss out{total, {}};
    out.report.mi_term = mi_term.value().item();
    out.report.prior_term = prior_term.value().item();
    out.report.smooth_term = smooth_term.value().item();
    out.report.total = total.value().item();
    return out;
}

}  // namespace nb
