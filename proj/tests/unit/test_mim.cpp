#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "fd.hpp"
#include "neuralbayes/errors.hpp"
#include "neuralbayes/mim.hpp"
#include "neuralbayes/oracles.hpp"

using namespace nb;
using std::numbers::ln2;

namespace {

Tensor random_rows(std::size_t b, std::size_t k, Rng& rng, double spread = 2.0) {
    Tensor t(Shape{b, k});
    for (std::size_t i = 0; i < b; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += (t.at(i, j) = std::exp(spread * standard_normal(rng)));
        for (std::size_t j = 0; j < k; ++j) t.at(i, j) /= s;
    }
    return t;
}

Tensor one_hot_identity(std::size_t k) {
    Tensor t(Shape{k, k});
    for (std::size_t i = 0; i < k; ++i) t.at(i, i) = 1.0;
    return t;
}

Tensor random_simplex(std::size_t k, Rng& rng) {
    Tensor t(Shape{k});
    double s = 0.0;
    for (double& v : t.values()) s += (v = std::exp(standard_normal(rng)));
    for (double& v : t.values()) v /= s;
    return t;
}

double v2_grad_entry(double p, double k, double eps = 0.0) {
    return -(1.0 / k) / (p + eps) + ((k - 1.0) / k) / (1.0 - p + eps);
}

}  // namespace

TEST(MiClosedForm, Examples) {
    Tensor constant(Shape{7, 3});
    for (std::size_t i = 0; i < 7; ++i) {
        constant.at(i, 0) = 0.2;
        constant.at(i, 1) = 0.5;
        constant.at(i, 2) = 0.3;
    }
    EXPECT_NEAR(mi_closed_form(PosteriorBatch(constant)), 0.0, 1e-15);
    EXPECT_NEAR(mi_closed_form(PosteriorBatch(one_hot_identity(4))), std::log(4.0), 1e-15);
    EXPECT_NEAR(std::log(4.0), 1.3862944, 1e-7);
}

TEST(MiClosedForm, MatchesBruteForceOracle) {
    Rng rng(101);
    const PosteriorBatch p(random_rows(32, 5, rng));
    EXPECT_NEAR(mi_closed_form(p), oracles::brute_force_mi(p), 1e-10);
}

TEST(MiClosedForm, BoundedByLogK) {
    Rng rng(102);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t b = 1 + rng() % 64, k = 2 + rng() % 7;
        const PosteriorBatch p(random_rows(b, k, rng, 4.0));
        const double mi = mi_closed_form(p);
        EXPECT_GE(mi, 0.0);
        EXPECT_LE(mi, std::log(static_cast<double>(k)) + 1e-9);
    }
}

TEST(MimV1, Examples) {
    Tensor constant(Shape{5, 2}, 0.5);
    EXPECT_NEAR(mim_v1_loss(PosteriorBatch(constant)), 0.0, 1e-6);
    for (std::size_t k : {2u, 3u, 6u}) {
        EXPECT_NEAR(mim_v1_loss(PosteriorBatch(one_hot_identity(k))), -std::log(static_cast<double>(k)), 1e-6);
    }
}

TEST(MimV1, ValueEqualsNegativeMiUpToGuard) {
    Rng rng(103);
    const PosteriorBatch p(random_rows(20, 4, rng));
    EXPECT_NEAR(mim_v1_loss(p, 0.0), -mi_closed_form(p), 1e-12);
    EXPECT_NEAR(mim_v1_loss(p, 1e-7), -mi_closed_form(p), 1e-5);
}

TEST(MimV1, GradientEqualsLiveMiGradient) {
    Rng rng(104);
    const Tensor logits = nbtest::randn({12, 4}, rng);
    Tape tape;
    Var z = tape.leaf("z", logits);
    const GradientMap g = tape.backward(mim_v1_loss(softmax_rows(z), 0.0));
    nb::Parameter param{"z", logits};
    const GradientMap fd = oracles::finite_diff_grad(
        [&]() {
            Tape t;
            return -oracles::brute_force_mi(PosteriorBatch(softmax_rows(t.constant(param.value)).value()));
        },
        {&param});
    EXPECT_LE(oracles::max_rel_diff(g, fd), 1e-4);
}

TEST(PriorPenaltyV1, Examples) {
    EXPECT_NEAR(uniform_prior_penalty_v1(PriorEstimate(Tensor::vector({0.5, 0.5}), 1)), -ln2, 1e-6);
    EXPECT_NEAR(uniform_prior_penalty_v1(PriorEstimate(Tensor::vector({1.0, 0.0}), 1)), 0.0, 1e-6);
    Tape tape;
    Var p = tape.leaf("p", Tensor::vector({0.25, 0.25, 0.25, 0.25}));
    const GradientMap g = tape.backward(uniform_prior_penalty_v1(p, 1e-7));
    for (double v : g.at("p").values()) EXPECT_NEAR(v, g.at("p")[0], 1e-15);
}

TEST(PriorPenaltyV2, Examples) {
    EXPECT_NEAR(uniform_prior_penalty_v2(PriorEstimate(Tensor::vector({0.5, 0.5}), 1), 0.0), 2.0 * ln2, 1e-15);
    EXPECT_NEAR(2.0 * ln2, 1.3862944, 1e-7);
    for (std::size_t k : {2u, 3u, 5u, 8u}) {
        Tape tape;
        Var p = tape.leaf("p", Tensor(Shape{k}, 1.0 / static_cast<double>(k)));
        const GradientMap g = tape.backward(uniform_prior_penalty_v2(p, 0.0));
        for (double v : g.at("p").values()) EXPECT_LE(std::abs(v), 1e-9);
    }
}

TEST(PriorPenaltyV2, GradientMatchesClosedForm) {
    Rng rng(105);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t k = 2 + trial % 6;
        const Tensor prior = random_simplex(k, rng);
        Tape tape;
        const GradientMap g = tape.backward(uniform_prior_penalty_v2(tape.leaf("p", prior), 1e-7));
        for (std::size_t j = 0; j < k; ++j) {
            EXPECT_NEAR(g.at("p")[j], v2_grad_entry(prior[j], static_cast<double>(k), 1e-7), 1e-9);
        }
    }
}

TEST(PriorPenaltyV2, UniformIsTheMinimumOnTheSimplex) {
    Rng rng(106);
    for (std::size_t k = 2; k <= 8; ++k) {
        const double at_uniform =
            uniform_prior_penalty_v2(PriorEstimate(Tensor(Shape{k}, 1.0 / static_cast<double>(k)), 1));
        for (int trial = 0; trial < 100; ++trial) {
            EXPECT_GE(uniform_prior_penalty_v2(PriorEstimate(random_simplex(k, rng), 1)), at_uniform - 1e-12);
        }
    }
}

TEST(PriorPenaltyV2, NearBoundaryStrongerThanV1) {
    // d/dp at p = 1 - 1e-3, K = 2, compared entrywise.
    Tape tape;
    Var p = tape.leaf("p", Tensor::vector({1.0 - 1e-3, 1e-3}));
    const GradientMap g2 = tape.backward(uniform_prior_penalty_v2(p, 0.0));
    EXPECT_GE(std::abs(g2.at("p")[0]), 100.0 * std::abs(std::log(1.0 - 1e-3)));
    EXPECT_NEAR(std::abs(g2.at("p")[0]), 499.5, 1e-3);
}

TEST(PriorGradientStrength, Examples) {
    for (std::size_t k : {2u, 3u, 10u}) {
        EXPECT_NEAR(prior_gradient_strength(1.0 / static_cast<double>(k), k).second, 0.0, 1e-12);
    }
    const auto [v1, v2] = prior_gradient_strength(0.999, 2);
    EXPECT_NEAR(std::abs(v1), 1.0005e-3, 1e-7);
    EXPECT_NEAR(std::abs(v2), 499.5, 1e-3);
    EXPECT_DOUBLE_EQ(prior_gradient_strength(0.5, 2).first, -ln2);
    EXPECT_THROW(prior_gradient_strength(1.0, 2), DomainError);
    EXPECT_THROW(prior_gradient_strength(0.0, 2), DomainError);
}

TEST(PriorGradientStrength, MonotoneNearOne) {
    double prev_v1 = INFINITY, prev_v2 = 0.0;
    for (int i = 1; i < 1000; ++i) {
        const double p = 0.9 + 0.1 * i / 1000.0;
        const auto [v1, v2] = prior_gradient_strength(p, 2);
        EXPECT_LT(std::abs(v1), prev_v1) << p;
        EXPECT_GT(std::abs(v2), prev_v2) << p;
        prev_v1 = std::abs(v1);
        prev_v2 = std::abs(v2);
    }
}

TEST(CollectStates, MlpTapsWithoutScales) {
    Network net = make_mlp({6, {5, 4, 3, 7}, true, 0, false}, 1);
    Rng rng(107);
    Tape tape;
    const ForwardResult r = net.forward(tape, tape.constant(nbtest::randn({8, 6}, rng)), {});
    MimConfig cfg;
    cfg.use_scales = true;  // no spatial axes, so nothing to pool
    const StateCollection sc = collect_states(r.states, cfg);
    ASSERT_EQ(sc.size(), 4u);
    for (const auto& s : sc) {
        const PosteriorBatch p = s.posterior();
        for (std::size_t i = 0; i < p.batch(); ++i) {
            double sum = 0.0;
            for (std::size_t k = 0; k < p.k(); ++k) sum += p(i, k);
            EXPECT_NEAR(sum, 1.0, 1e-9);
        }
    }
}

TEST(CollectStates, ReferenceCnnWithScalesGivesEightStates) {
    Network net = make_cnn("C(200,3,1,0)-P(2,2,0,max)-C(500,3,1,0)-C(700,3,1,0)-P(2,2,0,max)-C(1000,3,1,0)",
                           {3, 32, 32}, 3);
    Rng rng(108);
    const std::vector<Tensor> raw = net.predict_states(nbtest::randn({1, 3, 32, 32}, rng));
    Tape tape;
    std::vector<Var> states;
    for (const auto& t : raw) states.push_back(tape.constant(t));
    MimConfig cfg;
    EXPECT_EQ(collect_states(states, cfg).size(), 4u);
    cfg.use_scales = true;
    const StateCollection sc = collect_states(states, cfg);
    ASSERT_EQ(sc.size(), 8u);
    // 3x3 pools to 1x1 with the clipped kernel.
    EXPECT_EQ(sc[7].locations, 1u);
    EXPECT_EQ(sc[4].locations, 15u * 15u);
    for (const auto& s : sc) {
        for (std::size_t loc : {std::size_t{0}, s.locations - 1}) {
            const PosteriorBatch p = s.posterior(loc);
            double sum = 0.0;
            for (std::size_t k = 0; k < p.k(); ++k) sum += p(0, k);
            EXPECT_NEAR(sum, 1.0, 1e-9);
        }
    }
}

TEST(MimV2, ReducesToEntropyPlusPenaltyForOneState) {
    Rng rng(109);
    const Tensor logits = nbtest::randn({10, 4}, rng);
    Tape tape;
    const StateCollection sc = collect_states({tape.constant(logits)}, MimConfig{});
    MimConfig cfg;
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    const MimLoss loss = mim_v2_loss(sc, cfg, tape.constant(0.0));
    const Tensor probs = softmax_rows(tape.constant(logits)).value();
    double ent = 0.0;
    for (std::size_t i = 0; i < 10; ++i)
        for (std::size_t k = 0; k < 4; ++k) ent -= probs.at(i, k) * std::log(probs.at(i, k) + 1e-7) / 10.0;
    const PriorEstimate prior = prior_estimate(PosteriorBatch(probs));
    EXPECT_NEAR(loss.report.total, ent + uniform_prior_penalty_v2(prior, 1e-7), 1e-12);
}

TEST(MimV2, UniformBinaryPosteriorValue) {
    Tape tape;
    const StateCollection sc = collect_states({tape.constant(Tensor(Shape{6, 2}, 0.3))}, MimConfig{});
    MimConfig cfg;
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    const MimLoss loss = mim_v2_loss(sc, cfg, tape.constant(0.0));
    EXPECT_NEAR(loss.report.mi_term, ln2, 1e-6);
    EXPECT_NEAR(loss.report.prior_term, 2.0 * ln2, 1e-6);
    EXPECT_NEAR(loss.report.total, 3.0 * ln2, 1e-6);
}

TEST(MimV2, ReportPartsSumToTotal) {
    Rng rng(110);
    Tape tape;
    std::vector<Var> states{tape.constant(nbtest::randn({5, 3}, rng)), tape.constant(nbtest::randn({5, 2, 4, 3}, rng))};
    MimConfig cfg;
    cfg.use_scales = true;
    const MimLoss loss = mim_v2_loss(collect_states(states, cfg), cfg, tape.constant(0.37));
    const ObjectiveReport& r = loss.report;
    EXPECT_NEAR(r.total, r.mi_term + r.prior_term + r.smooth_term, 1e-12);
    EXPECT_DOUBLE_EQ(r.smooth_term, 4.0 * 0.37);
    EXPECT_EQ(loss.total.value().item(), r.total);
}

TEST(MimV2, SpatialStateAveragesPerLocationLosses) {
    Rng rng(111);
    const Tensor h = nbtest::randn({6, 3, 2, 3}, rng);
    Tape tape;
    MimConfig cfg;
    cfg.alpha = 1.5;
    cfg.beta = 0.0;
    const StateCollection sc = collect_states({tape.constant(h)}, cfg);
    ASSERT_EQ(sc.size(), 1u);
    ASSERT_EQ(sc[0].locations, 6u);
    const MimLoss loss = mim_v2_loss(sc, cfg, tape.constant(0.0));

    // Independent path: softmax over channels at each location, loss per location, averaged.
    double expect = 0.0;
    for (std::size_t y = 0; y < 2; ++y) {
        for (std::size_t x = 0; x < 3; ++x) {
            Tensor logits(Shape{6, 3});
            for (std::size_t b = 0; b < 6; ++b)
                for (std::size_t c = 0; c < 3; ++c) logits.at(b, c) = h[((b * 3 + c) * 2 + y) * 3 + x];
            const Tensor p = softmax_rows(tape.constant(logits)).value();
            double ent = 0.0;
            for (double v : p.values()) ent -= v * std::log(v + 1e-7) / 6.0;
            expect += (ent + 2.5 * uniform_prior_penalty_v2(prior_estimate(PosteriorBatch(p)), 1e-7)) / 6.0;
        }
    }
    EXPECT_NEAR(loss.report.total, expect, 1e-12);
}

TEST(MimV2, V1PriorSwitch) {
    Tape tape;
    MimConfig cfg;
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    cfg.v1_prior = true;
    const StateCollection sc = collect_states({tape.constant(Tensor(Shape{4, 2}, 1.0))}, cfg);
    EXPECT_NEAR(mim_v2_loss(sc, cfg, tape.constant(0.0)).report.prior_term, -ln2, 1e-6);
}

TEST(MimV2, EmaPriorBlendsHistory) {
    Rng rng(112);
    MimConfig cfg;
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    cfg.prior_ema_decay = 0.9;
    std::vector<Tensor> hist;
    Tape tape;
    const StateCollection first = collect_states({tape.constant(nbtest::randn({8, 3}, rng))}, cfg);
    mim_v2_loss(first, cfg, tape.constant(0.0), &hist);
    ASSERT_EQ(hist.size(), 1u);
    const Tensor p0 = mean_rows(first[0].probs).value();
    EXPECT_LE(max_abs_diff(hist[0], p0), 1e-15);
    const StateCollection second = collect_states({tape.constant(nbtest::randn({8, 3}, rng))}, cfg);
    mim_v2_loss(second, cfg, tape.constant(0.0), &hist);
    const Tensor p1 = mean_rows(second[0].probs).value();
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(hist[0][k], 0.1 * p1[k] + 0.9 * p0[k], 1e-15);
}

TEST(MimConfig, Validation) {
    MimConfig cfg;
    cfg.epsilon = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = MimConfig{};
    cfg.alpha = -1.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(SmoothnessTarget, LastTapPooledWhenSpatial) {
    Rng rng(113);
    const Tensor h = nbtest::randn({2, 3, 2, 2}, rng);
    Tape tape;
    const Tensor t = smoothness_target({tape.constant(nbtest::randn({2, 5}, rng)), tape.constant(h)}).value();
    ASSERT_EQ(t.shape(), (Shape{2, 3}));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 3; ++c) {
            double m = 0.0;
            for (std::size_t i = 0; i < 4; ++i) m += h[(b * 3 + c) * 4 + i] / 4.0;
            EXPECT_NEAR(t.at(b, c), m, 1e-15);
        }
}
