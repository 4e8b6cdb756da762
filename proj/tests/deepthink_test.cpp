#include <gtest/gtest.h>

#include "deepthink/deepthink.hpp"
#include "deepthink/model_io.hpp"
#include "reference_model.hpp"
#include "test_util.hpp"

using namespace dt;
using dt::tu::bit_identical;
using dt::tu::random_tensor;
using dt::tu::tiny_config;

namespace {
Tensor scalar(float v) { return Tensor({1, 1, 1}, {v}); }

std::vector<TokenId> demo_tokens(std::uint64_t seed, std::size_t n = 12, std::size_t vocab = 32) {
    std::mt19937_64 rng(seed);
    return tu::random_tokens(n, vocab, rng);
}
}  // namespace

TEST(PseudoGradient, FixedPointIsZero) {
    const Tensor h = random_tensor({2, 3, 4}, 1);
    const Tensor g = pseudo_gradient(h, h);
    for (float v : g.data()) EXPECT_EQ(v, 0.0f);
}

TEST(PseudoGradient, ScalarDifference) {
    EXPECT_EQ(pseudo_gradient(scalar(2), scalar(1))[0], 1.0f);
}

TEST(PseudoGradient, ElementwiseOracle) {
    const Tensor p = random_tensor({2, 5, 3}, 9), h = random_tensor({2, 5, 3}, 10);
    const Tensor g = pseudo_gradient(p, h);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g[i], p[i] - h[i]);
}

TEST(PseudoGradient, ShapeMismatchIsStateError) {
    EXPECT_THROW(pseudo_gradient(Tensor({1, 2, 2}), Tensor({1, 3, 2})), StateError);
    const LayerKV a{Tensor({1, 2, 2}), Tensor({1, 2, 2})}, b{Tensor({1, 2, 2}), Tensor({1, 1, 2})};
    EXPECT_THROW(pseudo_gradient(a, b), StateError);
}

TEST(MomentumUpdate, ZeroMomentumPassesGradientThrough) {
    const Tensor g = random_tensor({2, 2, 2}, 3);
    EXPECT_EQ(momentum_update(g, Tensor({2, 2, 2}), 0.9f), g);
}

TEST(MomentumUpdate, PureDecay) {
    EXPECT_EQ(momentum_update(Tensor({1, 1}), Tensor::matrix({{4}}), 0.5f), Tensor::matrix({{2}}));
}

TEST(MomentumUpdate, ThreeStepScalarChain) {
    // G = 1, 2, 3 with beta 0.5: M = 1, 2.5, 4.25
    Tensor m = scalar(0);
    const float expect[] = {1.0f, 2.5f, 4.25f};
    for (int i = 0; i < 3; ++i) {
        m = momentum_update(scalar(float(i + 1)), m, 0.5f);
        EXPECT_EQ(m[0], expect[i]);
    }
}

TEST(MomentumUpdate, GeometricDecayWithoutGradient) {
    const float beta = 0.9f;
    Tensor m = random_tensor({2, 4, 3}, 12, -5, 5);
    const double m0 = frobenius_norm(m);
    for (int t = 1; t <= 10; ++t) {
        m = momentum_update(Tensor(m.shape()), m, beta);
        EXPECT_NEAR(frobenius_norm(m), std::pow(double(beta), t) * m0, 1e-6 * std::max(1.0, m0));
    }
}

TEST(KvUpdate, ScaledMomentum) {
    const Tensor out = kv_update(Tensor({2, 2}), Tensor::matrix({{1, 2}, {3, 4}}), 0.01f);
    const float expect[] = {0.01f, 0.02f, 0.03f, 0.04f};
    for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(out[i], expect[i]);
}

TEST(KvUpdate, ZeroMomentumIsNoOp) {
    const Tensor h = random_tensor({2, 3, 2}, 4);
    EXPECT_EQ(kv_update(h, Tensor(h.shape()), 0.5f), h);
}

TEST(KvUpdate, BetaZeroIsExponentialMovingAverage) {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        const float eta = 0.05f + 0.9f * float(rng() % 1000) / 1000.0f;
        Tensor hist = random_tensor({2, 3, 2}, rng());
        Tensor mom(hist.shape());
        std::vector<double> ema(hist.data().begin(), hist.data().end());
        for (int t = 0; t < 8; ++t) {
            const Tensor present = random_tensor(hist.shape(), rng());
            mom = momentum_update(pseudo_gradient(present, hist), mom, 0.0f);
            hist = kv_update(hist, mom, eta);
            for (std::size_t i = 0; i < ema.size(); ++i) {
                ema[i] = (1.0 - eta) * ema[i] + eta * present[i];
                EXPECT_NEAR(hist[i], ema[i], 1e-6);
            }
        }
    }
}

TEST(ThinkRecurrence, ScalarHandChain) {
    // history_1 = 1, present 2 then 2, beta 0.5, eta 1 -> 2, 2.5
    Tensor hist = scalar(1), mom = scalar(0);
    const float expect[] = {2.0f, 2.5f};
    for (int i = 0; i < 2; ++i) {
        mom = momentum_update(pseudo_gradient(scalar(2), hist), mom, 0.5f);
        hist = kv_update(hist, mom, 1.0f);
        EXPECT_EQ(hist[0], expect[i]);
    }
}

TEST(ThinkStep, StepInvariantPresentIsCopiedWithUnitEta) {
    // With W_V = b_V = 0 attention contributes only b_O, so the prefix cannot
    // change any layer input and the present KV is the same every step.
    const ModelConfig cfg = tiny_config();
    ModelWeights w = random_weights(cfg, 2);
    for (auto& L : w.layers) {
        std::fill(L.wv.data().begin(), L.wv.data().end(), 0.0f);
        std::fill(L.bv.data().begin(), L.bv.data().end(), 0.0f);
    }
    const auto demo = demo_tokens(2);
    ThinkConfig tc;
    tc.beta = 0.0f;
    tc.eta = 1.0f;
    KVState history = model_forward(w, demo).present;
    history.step = 1;
    // perturb history so the update has work to do
    for (auto& l : history.layers) for (float& v : l.keys.data()) v += 0.5f;
    const ThinkStepResult r = think_step(w, demo, history, MomentumState::zeros_like(history), tc);
    const KVState present = model_forward(w, demo).present;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        EXPECT_LT(max_abs_diff(r.state.layers[l].keys, present.layers[l].keys), 1e-6f);
        EXPECT_LT(max_abs_diff(r.state.layers[l].values, present.layers[l].values), 1e-6f);
    }
}

TEST(ThinkStep, MatchesStraightLineOracle) {
    const ModelConfig cfg = tiny_config();
    const ModelWeights w = random_weights(cfg, 42);
    const auto demo = demo_tokens(42);
    ThinkConfig tc;
    tc.steps = 2;
    const ThinkResult got = deep_think(w, demo, tc);

    ref::ThinkState s;
    s.history = ref::forward(w, demo, nullptr, 0).present;
    s.momentum = s.history;
    for (auto& l : s.momentum)
        for (auto* hm : {&l.k, &l.v})
            for (auto& m : *hm) for (auto& r : m) std::fill(r.begin(), r.end(), 0.0);
    s = ref::think_step(w, demo, s, tc.eta, tc.beta);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        EXPECT_LT(ref::max_diff(s.history[l].k, got.final.layers[l].keys), 1e-5);
        EXPECT_LT(ref::max_diff(s.history[l].v, got.final.layers[l].values), 1e-5);
    }
}

TEST(ThinkStep, InputsAreNotMutated) {
    const ModelConfig cfg = tiny_config();
    const ModelWeights w = random_weights(cfg, 4);
    const auto demo = demo_tokens(4);
    KVState history = model_forward(w, demo).present;
    history.step = 1;
    MomentumState mom = MomentumState::zeros_like(history);
    for (auto& l : mom.layers) l.keys = random_tensor(l.keys.shape(), 5);
    const KVState h0 = history;
    const MomentumState m0 = mom;
    think_step(w, demo, history, mom, ThinkConfig{});
    EXPECT_TRUE(bit_identical(history, h0));
    for (std::size_t l = 0; l < mom.layers.size(); ++l) EXPECT_TRUE(bit_identical(mom.layers[l].keys, m0.layers[l].keys));
}

TEST(ThinkStep, HistoryLengthMustMatchDemos) {
    const ModelConfig cfg = tiny_config();
    const ModelWeights w = random_weights(cfg, 4);
    const auto demo = demo_tokens(4);
    KVState history = model_forward(w, std::span(demo).first(5)).present;
    EXPECT_THROW(think_step(w, demo, history, MomentumState::zeros_like(history), ThinkConfig{}), StateError);
}

TEST(DeepThink, SingleStepIsVanillaPresent) {
    const ModelConfig cfg = tiny_config();
    const ModelWeights w = random_weights(cfg, 6);
    const auto demo = demo_tokens(6);
    ThinkConfig tc;
    tc.steps = 1;
    const ThinkResult r = deep_think(w, demo, tc);
    KVState vanilla = model_forward(w, demo).present;
    vanilla.step = 1;
    EXPECT_TRUE(bit_identical(r.final, vanilla));
    EXPECT_TRUE(r.traces.empty());
}

TEST(DeepThink, UnitEtaZeroBetaReplacesWithLatestPresent) {
    const ModelConfig cfg = tiny_config();
    const ModelWeights w = random_weights(cfg, 7);
    const auto demo = demo_tokens(7);
    ThinkConfig tc;
    tc.beta = 0.0f;
    tc.eta = 1.0f;
    for (std::size_t T : {2u, 3u, 5u}) {
        tc.steps = T - 1;
        const ThinkResult prev = deep_think(w, demo, tc);
        tc.steps = T;
        const ThinkResult cur = deep_think(w, demo, tc);
        const KVState present = model_forward(w, demo, &prev.final, 0).present;
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            EXPECT_LT(max_abs_diff(cur.final.layers[l].keys, present.layers[l].keys), 1e-6f);
            EXPECT_LT(max_abs_diff(cur.final.layers[l].values, present.layers[l].values), 1e-6f);
        }
    }
}

TEST(DeepThink, TracesShapesAndSnapshots) {
    const ModelConfig cfg = tiny_config();
    const ModelWeights w = random_weights(cfg, 8);
    const auto demo = demo_tokens(8);
    ThinkConfig tc;
    tc.steps = 6;
    tc.record_snapshots = true;
    const ThinkResult r = deep_think(w, demo, tc);
    EXPECT_EQ(r.final.step, 6u);
    ASSERT_EQ(r.traces.size(), 5 * cfg.n_layers);
    std::size_t k = 0;
    for (std::size_t t = 2; t <= 6; ++t)
        for (std::size_t l = 0; l < cfg.n_layers; ++l, ++k) {
            EXPECT_EQ(r.traces[k].step, t);
            EXPECT_EQ(r.traces[k].layer, l);
            EXPECT_TRUE(std::isfinite(r.traces[k].grad_norm_k) && r.traces[k].grad_norm_k >= 0);
            EXPECT_TRUE(std::isfinite(r.traces[k].grad_norm_v) && r.traces[k].grad_norm_v >= 0);
        }
    ASSERT_EQ(r.snapshots.size(), 6u);
    for (std::size_t t = 0; t < 6; ++t) {
        EXPECT_EQ(r.snapshots[t].step, t + 1);
        for (std::size_t l = 0; l < cfg.n_layers; ++l)
            EXPECT_EQ(r.snapshots[t].layers[l].keys.shape(), r.snapshots[0].layers[l].keys.shape());
    }
    EXPECT_TRUE(bit_identical(r.snapshots.back(), r.final));
}

TEST(DeepThink, Deterministic) {
    const ModelConfig cfg = tiny_config();
    const ModelWeights w = random_weights(cfg, 9);
    const auto demo = demo_tokens(9);
    ThinkConfig tc;
    tc.steps = 4;
    const ThinkResult a = deep_think(w, demo, tc), b = deep_think(w, demo, tc);
    EXPECT_TRUE(bit_identical(a.final, b.final));
    for (std::size_t i = 0; i < a.traces.size(); ++i) EXPECT_EQ(a.traces[i].grad_norm_k, b.traces[i].grad_norm_k);
}

TEST(DeepThink, DivergenceNamesStepAndLayer) {
    const ModelConfig cfg = tiny_config();
    const ModelWeights w = random_weights(cfg, 10);
    const auto demo = demo_tokens(10);
    ThinkConfig tc;
    tc.steps = 8;
    tc.eta = 1e38f;
    try {
        deep_think(w, demo, tc);
        FAIL() << "expected NumericDivergence";
    } catch (const NumericDivergence& e) {
        EXPECT_GE(e.step(), 2u);
        EXPECT_LT(e.layer(), cfg.n_layers);
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    }
}

TEST(DeepThink, RejectsBadConfigAndInputs) {
    const ModelConfig cfg = tiny_config(32, 8);
    const ModelWeights w = random_weights(cfg, 1);
    ThinkConfig tc;
    tc.beta = 1.0f;
    EXPECT_THROW(deep_think(w, std::vector<TokenId>{1, 2}, tc), ConfigError);
    tc = {};
    tc.eta = 0.0f;
    EXPECT_THROW(deep_think(w, std::vector<TokenId>{1, 2}, tc), ConfigError);
    tc = {};
    tc.steps = 0;
    EXPECT_THROW(deep_think(w, std::vector<TokenId>{1, 2}, tc), ConfigError);
    EXPECT_THROW(deep_think(w, std::vector<TokenId>{}, ThinkConfig{}), InputError);
    EXPECT_THROW(deep_think(w, std::vector<TokenId>(9, 1), ThinkConfig{}), CapacityError);
}
