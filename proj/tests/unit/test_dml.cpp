#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "fd.hpp"
#include "neuralbayes/dml.hpp"
#include "neuralbayes/errors.hpp"
#include "neuralbayes/oracles.hpp"

using namespace nb;
using std::numbers::ln2;

namespace {

Tensor random_l(std::size_t b, Rng& rng) {
    Tensor l(Shape{b});
    for (double& v : l.values()) v = 1.0 / (1.0 + std::exp(-2.0 * standard_normal(rng)));
    return l;
}

Tensor flipped(const Tensor& l) {
    Tensor out = l;
    for (double& v : out.values()) v = 1.0 - v;
    return out;
}

// Atom weights q1 = L / sum L and q0 = (1 - L) / sum (1 - L).
std::pair<Tensor, Tensor> atom_weights(const Tensor& l) {
    double s1 = 0.0, s0 = 0.0;
    for (double v : l.values()) {
        s1 += v;
        s0 += 1.0 - v;
    }
    Tensor q1(l.shape()), q0(l.shape());
    for (std::size_t i = 0; i < l.size(); ++i) {
        q1[i] = l[i] / s1;
        q0[i] = (1.0 - l[i]) / s0;
    }
    return {q0, q1};
}

}  // namespace

TEST(DmlObjective, Examples) {
    EXPECT_NEAR(dml_binary_objective(Tensor(Shape{6}, 0.5)), 0.0, 1e-15);
    EXPECT_NEAR(dml_binary_objective(Tensor::vector({1, 0, 0, 1, 1})), ln2, 1e-15);
    EXPECT_NEAR(ln2, 0.6931472, 1e-7);
    EXPECT_THROW(dml_binary_objective(Tensor::vector({1, 1})), DegeneratePriorError);
    EXPECT_THROW(dml_binary_objective(Tensor::vector({0.3, 0.2}), 1.0), DegeneratePriorError);
}

TEST(DmlObjective, MatchesDiscreteJsOracle) {
    Rng rng(201);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor l = random_l(2 + rng() % 60, rng);
        const auto [q0, q1] = atom_weights(l);
        EXPECT_NEAR(dml_binary_objective(l), oracles::js_divergence_discrete(q0, q1), 1e-10);
    }
}

TEST(DmlObjective, RangeAndLabelSymmetry) {
    Rng rng(202);
    for (int trial = 0; trial < 200; ++trial) {
        Tensor l = random_l(2 + rng() % 60, rng);
        if (trial % 3 == 0) l[0] = 0.0;
        if (trial % 5 == 0) l[1] = 1.0;
        const double v = dml_binary_objective(l);
        EXPECT_GE(v, -1e-15);
        EXPECT_LE(v, ln2 + 1e-9);
        EXPECT_NEAR(dml_binary_objective(flipped(l)), v, 1e-14);
    }
}

TEST(DmlLoss, Examples) {
    EXPECT_NEAR(dml_binary_loss(Tensor(Shape{8}, 0.5)), ln2, 1e-6);
    EXPECT_LE(dml_binary_loss(Tensor::vector({1, 0, 1, 0, 0, 1})), 1e-5);
    EXPECT_GE(dml_binary_loss(Tensor::vector({1, 0, 1, 0, 0, 1})), 0.0);
    EXPECT_THROW(dml_binary_loss(Tensor::vector({0.4})), ArgumentError);
    EXPECT_THROW(dml_binary_loss(Tensor::vector({0.0, 0.0})), DegeneratePriorError);
}

TEST(DmlLoss, ComplementsObjectiveToLog2) {
    Rng rng(203);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor l = random_l(2 + rng() % 60, rng);
        EXPECT_NEAR(dml_binary_loss(l) + dml_binary_objective(l), ln2, 1e-5);
    }
}

TEST(DmlLoss, GradientMatchesFiniteDifferences) {
    Rng rng(204);
    const Tensor z = nbtest::randn({9}, rng);
    nbtest::expect_grad_matches(
        [](Tape&, const auto& v) {
            Var l = 1.0 / (1.0 + exp(-v[0]));
            return dml_binary_loss(l, 1e-7);
        },
        {z});
}

TEST(DmlLoss, PriorCollapseIsRepelled) {
    Rng rng(205);
    const Tensor l = random_l(32, rng);
    // Interior: finite.
    for (double p = 0.01; p < 1.0; p += 0.01) {
        EXPECT_TRUE(std::isfinite(dml_binary_objective(l, p)));
        EXPECT_TRUE(std::isfinite(dml_binary_loss(l, p, 1e-7)));
    }
    // Toward either boundary the loss grows without bound.
    double prev_lo = 0.0, prev_hi = 0.0;
    for (int e = 2; e <= 14; ++e) {
        const double d = std::pow(10.0, -e);
        const double lo = dml_binary_loss(l, d, 1e-7), hi = dml_binary_loss(l, 1.0 - d, 1e-7);
        EXPECT_GT(lo, prev_lo);
        EXPECT_GT(hi, prev_hi);
        prev_lo = lo;
        prev_hi = hi;
    }
    EXPECT_GT(prev_lo, 5.0);
    EXPECT_GT(prev_hi, 5.0);
}

TEST(DmlMulti, Examples) {
    const PosteriorBatch uniform(Tensor(Shape{6, 3}, 1.0 / 3.0));
    EXPECT_NEAR(dml_multi_loss(uniform), 0.0, 1e-6);
    Tensor onehot(Shape{6, 3});
    for (std::size_t i = 0; i < 6; ++i) onehot.at(i, i % 3) = 1.0;
    EXPECT_NEAR(dml_multi_loss(PosteriorBatch(onehot)), -ln2, 1e-5);
    Tensor dead(Shape{4, 3});
    for (std::size_t i = 0; i < 4; ++i) dead.at(i, i % 2) = 1.0;
    EXPECT_THROW(dml_multi_loss(PosteriorBatch(dead)), DegeneratePriorError);
}

TEST(DmlMulti, TwoPartitionsReduceToBinary) {
    Rng rng(206);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor l = random_l(3 + rng() % 40, rng);
        Tensor p(Shape{l.size(), 2});
        for (std::size_t i = 0; i < l.size(); ++i) {
            p.at(i, 0) = l[i];
            p.at(i, 1) = 1.0 - l[i];
        }
        const double multi = dml_multi_loss(PosteriorBatch(p));
        EXPECT_NEAR(multi, dml_binary_loss(l) - ln2, 1e-9);
        EXPECT_NEAR(dml_binary_loss(l), dml_binary_loss(flipped(l)), 1e-9);
    }
}

TEST(DmlMulti, RangeOnRandomPosteriors) {
    Rng rng(207);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t b = 4 + rng() % 40, k = 2 + rng() % 6;
        Tensor p(Shape{b, k});
        for (std::size_t i = 0; i < b; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < k; ++j) s += (p.at(i, j) = std::exp(3.0 * standard_normal(rng)));
            for (std::size_t j = 0; j < k; ++j) p.at(i, j) /= s;
        }
        const double v = dml_multi_loss(PosteriorBatch(p));
        EXPECT_GE(v, -ln2 - 1e-9);
        EXPECT_LE(v, 1e-3);
    }
}

TEST(DmlMulti, GradientMatchesFiniteDifferences) {
    Rng rng(208);
    nbtest::expect_grad_matches([](Tape&, const auto& v) { return dml_multi_loss(softmax_rows(v[0]), 1e-7); },
                                {nbtest::randn({7, 3}, rng)});
}

TEST(DmlConfig, Validation) {
    DmlConfig cfg;
    cfg.k = 1;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = DmlConfig{};
    cfg.noise_sigma = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Smoothness, ConstantFunctionGivesZero) {
    Rng rng(209);
    const Tensor x = nbtest::randn({6, 4}, rng);
    Tape tape;
    const ForwardFn f = [](Var in) { return in * 0.0 + 3.0; };
    EXPECT_EQ(smoothness_penalty(f, tape, x, 0.1, rng).value().item(), 0.0);
}

TEST(Smoothness, LinearMapIsExactAndIndependentOfZeta) {
    Rng rng(210);
    const std::size_t b = 5, n = 4, m = 3;
    const Tensor x = nbtest::randn({b, n}, rng), w = nbtest::randn({m, n}, rng);
    for (double sigma : {0.01, 0.1, 3.0}) {
        Tape tape;
        const ForwardFn f = [&](Var in) { return matmul(in, transpose(tape.constant(w))); };
        const SmoothnessSample s = draw_smoothness_sample(x, sigma, rng);
        const double pen = smoothness_penalty(f(tape.constant(x)), f, x, s).value().item();
        double expect = 0.0;
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t r = 0; r < m; ++r) {
                double wd = 0.0;
                for (std::size_t c = 0; c < n; ++c) wd += w.at(r, c) * s.directions.at(i, c);
                expect += wd * wd / static_cast<double>(b);
            }
        EXPECT_NEAR(pen, expect, 1e-9);
    }
}

TEST(Smoothness, DirectionsAreUnitAndInDataSpan) {
    Rng rng(211);
    // Rank-3 data in 8 dimensions so the span is a proper subspace.
    const Tensor basis = nbtest::randn({3, 8}, rng), coef = nbtest::randn({10, 3}, rng);
    Tensor x(Shape{10, 8});
    for (std::size_t i = 0; i < 10; ++i)
        for (std::size_t c = 0; c < 8; ++c)
            for (std::size_t r = 0; r < 3; ++r) x.at(i, c) += coef.at(i, r) * basis.at(r, c);
    const SmoothnessSample s = draw_smoothness_sample(x, 0.1, rng);
    EXPECT_GE(std::abs(s.zeta), 1e-4);
    Eigen::MatrixXd xt(8, 10);
    for (std::size_t i = 0; i < 10; ++i)
        for (std::size_t c = 0; c < 8; ++c) xt(c, i) = x.at(i, c);
    const auto qr = xt.colPivHouseholderQr();
    for (std::size_t i = 0; i < 10; ++i) {
        Eigen::VectorXd d(8);
        for (std::size_t c = 0; c < 8; ++c) d(c) = s.directions.at(i, c);
        EXPECT_NEAR(d.norm(), 1.0, 1e-9);
        const Eigen::VectorXd coefs = qr.solve(d);
        EXPECT_LE((xt * coefs - d).norm(), 1e-9);
    }
}

TEST(Smoothness, ZetaAvoidsZero) {
    Rng rng(212);
    const Tensor x = nbtest::randn({3, 2}, rng);
    for (int i = 0; i < 2000; ++i) EXPECT_GE(std::abs(draw_smoothness_sample(x, 1e-4, rng).zeta), 1e-4);
}

TEST(Smoothness, AllZeroBatchRejected) {
    Rng rng(213);
    EXPECT_THROW(draw_smoothness_sample(Tensor(Shape{4, 3}), 0.1, rng), ArgumentError);
}

TEST(Smoothness, SeededAndPermutationConsistent) {
    Rng data_rng(214);
    const Tensor x = nbtest::randn({6, 3}, data_rng), w = nbtest::randn({2, 3}, data_rng);
    const auto run = [&](const Tensor& batch, std::uint64_t seed) {
        Tape tape;
        Rng rng(seed);
        const ForwardFn f = [&](Var in) { return softmax_rows(matmul(in, transpose(tape.constant(w)))); };
        return smoothness_penalty(f, tape, batch, 0.1, rng).value().item();
    };
    EXPECT_EQ(run(x, 9), run(x, 9));

    // Permuting the batch together with its noise permutes the per-sample terms.
    Rng rng(15);
    const SmoothnessSample s = draw_smoothness_sample(x, 0.1, rng);
    const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    Tensor xp(x.shape());
    SmoothnessSample sp{Tensor(x.shape()), s.zeta};
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            xp.at(i, c) = x.at(perm[i], c);
            sp.directions.at(i, c) = s.directions.at(perm[i], c);
        }
    const auto per_sample = [&](const Tensor& batch, const SmoothnessSample& smp) {
        std::vector<double> terms;
        for (std::size_t i = 0; i < 6; ++i) {
            Tensor one(Shape{1, 3}), dir(Shape{1, 3});
            for (std::size_t c = 0; c < 3; ++c) {
                one.at(0, c) = batch.at(i, c);
                dir.at(0, c) = smp.directions.at(i, c);
            }
            Tape tape;
            const ForwardFn f = [&](Var in) { return softmax_rows(matmul(in, transpose(tape.constant(w)))); };
            terms.push_back(smoothness_penalty(f(tape.constant(one)), f, one, {dir, smp.zeta}).value().item());
        }
        std::sort(terms.begin(), terms.end());
        return terms;
    };
    EXPECT_EQ(per_sample(x, s), per_sample(xp, sp));
}
