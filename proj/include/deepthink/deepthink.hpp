#pragma once

// Iterative forward optimisation of demonstration key/value matrices.
//
// Step 1 is a plain forward over the demonstrations: history := present,
// momentum := 0. Each later step t runs the demonstrations again with the
// history as an attention prefix and, per layer,
//
//   G_t = present_t - history_{t-1}
//   M_t = G_t + beta * M_{t-1}
//   history_t = history_{t-1} + eta * M_t
//
// for keys and values independently.

#include <optional>
#include <span>
#include <vector>

#include "deepthink/transformer.hpp"

namespace dt {

struct ThinkConfig {
    std::size_t steps{15};
    float eta{0.01f};
    float beta{0.9f};
    std::size_t demo_position_offset{0};
    bool record_snapshots{false};

    void validate() const {
        if (steps < 1) throw ConfigError("think steps must be >= 1");
        if (!(eta > 0.0f)) throw ConfigError("eta must be positive");
        if (!(beta >= 0.0f && beta < 1.0f)) throw ConfigError("beta must lie in [0, 1)");
    }
};

struct LayerMomentum {
    Tensor keys;
    Tensor values;
};

struct MomentumState {
    std::vector<LayerMomentum> layers;

    static MomentumState zeros_like(const KVState& s) {
        MomentumState m;
        for (const auto& l : s.layers) m.layers.push_back({Tensor(l.keys.shape()), Tensor(l.values.shape())});
        return m;
    }
};

struct GradTrace {
    std::size_t step{0};
    std::size_t layer{0};  // 0-based
    double grad_norm_k{0.0};
    double grad_norm_v{0.0};
};

struct ThinkResult {
    KVState final;
    std::vector<GradTrace> traces;
    std::vector<KVState> snapshots;  // snapshots[t-1] is the state after step t
};

inline Tensor pseudo_gradient(const Tensor& present, const Tensor& history) {
    if (present.shape() != history.shape()) {
        throw StateError("present " + shape_str(present.shape()) + " and history " +
                         shape_str(history.shape()) + " disagree");
    }
    Tensor g = present;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= history[i];
    return g;
}

inline LayerKV pseudo_gradient(const LayerKV& present, const LayerKV& history) {
    return {pseudo_gradient(present.keys, history.keys),
            pseudo_gradient(present.values, history.values)};
}

inline Tensor momentum_update(const Tensor& grad, const Tensor& prev, float beta) {
    if (grad.shape() != prev.shape()) {
        throw StateError("gradient " + shape_str(grad.shape()) + " and momentum " +
                         shape_str(prev.shape()) + " disagree");
    }
    Tensor m = grad;
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += beta * prev[i];
    return m;
}

inline Tensor kv_update(const Tensor& history, const Tensor& momentum, float eta) {
    if (history.shape() != momentum.shape()) {
        throw StateError("history " + shape_str(history.shape()) + " and momentum " +
                         shape_str(momentum.shape()) + " disagree");
    }
    Tensor out = history;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += eta * momentum[i];
    return out;
}

struct ThinkStepResult {
    KVState state;
    MomentumState momentum;
    std::vector<GradTrace> traces;
};

// Advances history from step history.step to history.step + 1. Inputs are
// not modified.
inline ThinkStepResult think_step(const ModelWeights& model, std::span<const TokenId> demo_tokens,
                                  const KVState& history, const MomentumState& momentum,
                                  const ThinkConfig& cfg) {
    if (history.len() != demo_tokens.size()) {
        throw StateError("history holds " + std::to_string(history.len()) + " positions for " +
                         std::to_string(demo_tokens.size()) + " demonstration tokens");
    }
    if (momentum.layers.size() != history.layers.size()) {
        throw StateError("momentum and history layer counts differ");
    }
    ForwardOptions opts;
    opts.position_offset = cfg.demo_position_offset;
    opts.compute_logits = false;
    ForwardResult fwd = model_forward(model, demo_tokens, &history, opts);

    const std::size_t t = history.step + 1;
    ThinkStepResult out;
    out.state.step = t;
    for (std::size_t l = 0; l < history.layers.size(); ++l) {
        const LayerKV g = pseudo_gradient(fwd.present.layers[l], history.layers[l]);
        LayerMomentum m{momentum_update(g.keys, momentum.layers[l].keys, cfg.beta),
                        momentum_update(g.values, momentum.layers[l].values, cfg.beta)};
        LayerKV next{kv_update(history.layers[l].keys, m.keys, cfg.eta),
                     kv_update(history.layers[l].values, m.values, cfg.eta)};
        if (!next.keys.all_finite() || !next.values.all_finite() || !m.keys.all_finite() ||
            !m.values.all_finite()) {
            throw NumericDivergence(t, l);
        }
        out.traces.push_back({t, l, frobenius_norm(g.keys), frobenius_norm(g.values)});
        out.state.layers.push_back(std::move(next));
        out.momentum.layers.push_back(std::move(m));
    }
    return out;
}

inline ThinkResult deep_think(const ModelWeights& model, std::span<const TokenId> demo_tokens,
                              const ThinkConfig& cfg) {
    cfg.validate();
    if (demo_tokens.empty()) throw InputError("no demonstration tokens");
    if (demo_tokens.size() > model.config.max_positions) {
        throw CapacityError("demonstrations of " + std::to_string(demo_tokens.size()) +
                            " tokens exceed max_positions " +
                            std::to_string(model.config.max_positions));
    }
    ForwardOptions opts;
    opts.position_offset = cfg.demo_position_offset;
    opts.compute_logits = false;
    KVState state = model_forward(model, demo_tokens, nullptr, opts).present;
    state.step = 1;
    MomentumState momentum = MomentumState::zeros_like(state);

    ThinkResult result;
    if (cfg.record_snapshots) result.snapshots.push_back(state);
    for (std::size_t t = 2; t <= cfg.steps; ++t) {
        ThinkStepResult s = think_step(model, demo_tokens, state, momentum, cfg);
        state = std::move(s.state);
        momentum = std::move(s.momentum);
        result.traces.insert(result.traces.end(), s.traces.begin(), s.traces.end());
        if (cfg.record_snapshots) result.snapshots.push_back(state);
    }
    result.final = std::move(state);
    return result;
}

}  // namespace dt
