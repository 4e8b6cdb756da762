#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "deepthink/kernels.hpp"

namespace dt {

using TokenId = std::int32_t;

struct ModelConfig {
    std::size_t n_layers{0};
    std::size_t n_heads{0};
    std::size_t d_model{0};
    std::size_t vocab_size{0};
    std::size_t max_positions{0};
    std::size_t ffn_hidden{0};
    float ln_eps{1e-5f};

    std::size_t d_head() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers == 0 || n_heads == 0 || d_model == 0 || vocab_size == 0 ||
            max_positions == 0 || ffn_hidden == 0) {
            throw ConfigError("model config counts must all be >= 1");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                              std::to_string(n_heads));
        }
        if (!(ln_eps > 0.0f)) throw ConfigError("ln_eps must be positive");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Projection matrices are stored [in x out] so that y = x . W + b.
struct LayerWeights {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv;
    Tensor wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor fc_w, fc_b;
    Tensor proj_w, proj_b;
};

struct ModelWeights {
    ModelConfig config;
    Tensor token_embedding;     // [vocab x d_model]
    Tensor position_embedding;  // [max_positions x d_model]
    std::vector<LayerWeights> layers;
    Tensor lnf_gain, lnf_bias;
    std::optional<Tensor> unembedding;  // [vocab x d_model]; tied to token_embedding when absent

    const Tensor& output_embedding() const { return unembedding ? *unembedding : token_embedding; }

    void validate() const {
        config.validate();
        const auto d = config.d_model, f = config.ffn_hidden;
        auto expect = [](const Tensor& t, const Shape& s, const std::string& name) {
            if (t.shape() != s) {
                throw ConfigError(name + " has shape " + shape_str(t.shape()) + ", expected " +
                                  shape_str(s));
            }
            if (!t.all_finite()) throw ConfigError(name + " contains non-finite values");
        };
        expect(token_embedding, {config.vocab_size, d}, "token_embedding");
        expect(position_embedding, {config.max_positions, d}, "position_embedding");
        if (layers.size() != config.n_layers) {
            throw ConfigError("expected " + std::to_string(config.n_layers) + " layers, got " +
                              std::to_string(layers.size()));
        }
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& w = layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            expect(w.ln1_gain, {d}, p + "ln1_gain");
            expect(w.ln1_bias, {d}, p + "ln1_bias");
            expect(w.wq, {d, d}, p + "wq");
            expect(w.bq, {d}, p + "bq");
            expect(w.wk, {d, d}, p + "wk");
            expect(w.bk, {d}, p + "bk");
            expect(w.wv, {d, d}, p + "wv");
            expect(w.bv, {d}, p + "bv");
            expect(w.wo, {d, d}, p + "wo");
            expect(w.bo, {d}, p + "bo");
            expect(w.ln2_gain, {d}, p + "ln2_gain");
            expect(w.ln2_bias, {d}, p + "ln2_bias");
            expect(w.fc_w, {d, f}, p + "fc_w");
            expect(w.fc_b, {f}, p + "fc_b");
            expect(w.proj_w, {f, d}, p + "proj_w");
            expect(w.proj_b, {d}, p + "proj_b");
        }
        expect(lnf_gain, {d}, "lnf_gain");
        expect(lnf_bias, {d}, "lnf_bias");
        if (unembedding) expect(*unembedding, {config.vocab_size, d}, "unembedding");
    }
};

// Per-layer key/value matrices, each [n_heads x len x d_head].
struct LayerKV {
    Tensor keys;
    Tensor values;

    std::size_t n_heads() const { return keys.dim(0); }
    std::size_t len() const { return keys.dim(1); }
    std::size_t d_head() const { return keys.dim(2); }

    friend bool operator==(const LayerKV&, const LayerKV&) = default;
};

// Key/value state for every layer; the bridge between thinking and inference.
struct KVState {
    std::vector<LayerKV> layers;
    std::size_t step{0};

    std::size_t len() const { return layers.empty() ? 0 : layers.front().len(); }

    void validate(const ModelConfig& cfg) const {
        if (layers.size() != cfg.n_layers) {
            throw ConfigError("kv state has " + std::to_string(layers.size()) +
                              " layers, model has " + std::to_string(cfg.n_layers));
        }
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& kv = layers[l];
            const Shape expected{cfg.n_heads, len(), cfg.d_head()};
            if (kv.keys.shape() != expected || kv.values.shape() != expected) {
                throw ConfigError("kv layer " + std::to_string(l) + " has shape " +
                                  shape_str(kv.keys.shape()) + "/" + shape_str(kv.values.shape()) +
                                  ", expected " + shape_str(expected));
            }
        }
    }

    friend bool operator==(const KVState&, const KVState&) = default;
};

struct QKV {
    Tensor q, k, v;  // each [n_heads x len x d_head]
};

// Projects already layer-normed rows onto per-head queries, keys and values.
inline QKV project_qkv(const Tensor& x, const LayerWeights& w, const ModelConfig& cfg) {
    if (x.rank() != 2 || x.dim(1) != cfg.d_model) {
        throw DimensionError("project_qkv input " + shape_str(x.shape()) + " for d_model " +
                             std::to_string(cfg.d_model));
    }
    const std::size_t len = x.dim(0), heads = cfg.n_heads, dh = cfg.d_head();
    auto split = [&](const Tensor& wmat, const Tensor& bias) {
        Tensor flat = kernels::matmul(x, wmat);
        kernels::add_row_bias(flat, bias);
        Tensor out({heads, len, dh});
        for (std::size_t i = 0; i < len; ++i) {
            for (std::size_t h = 0; h < heads; ++h) {
                for (std::size_t c = 0; c < dh; ++c) out.at(h, i, c) = flat.at(i, h * dh + c);
            }
        }
        return out;
    };
    return {split(w.wq, w.bq), split(w.wk, w.bk), split(w.wv, w.bv)};
}

// Multi-head attention over [prefix || present]. Every prefix position is
// visible to every query; present positions are causally masked. When
// `probs` is non-null it receives [n_heads x len x (prefix_len + len)]
// attention weights with masked entries zero.
inline Tensor attend_with_prefix(const Tensor& q, const Tensor& present_k, const Tensor& present_v,
                                 const LayerKV* prefix, const LayerWeights& w,
                                 const ModelConfig& cfg, Tensor* probs = nullptr) {
    const std::size_t heads = cfg.n_heads, dh = cfg.d_head();
    if (q.rank() != 3 || q.dim(0) != heads || q.dim(2) != dh || present_k.shape() != q.shape() ||
        present_v.shape() != q.shape()) {
        throw DimensionError("attention q/k/v shapes " + shape_str(q.shape()) + "/" +
                             shape_str(present_k.shape()) + "/" + shape_str(present_v.shape()));
    }
    const std::size_t len = q.dim(1);
    std::size_t plen = 0;
    if (prefix) {
        if (prefix->keys.rank() != 3 || prefix->n_heads() != heads || prefix->d_head() != dh ||
            prefix->values.shape() != prefix->keys.shape()) {
            throw ConfigError("prefix kv shape " + shape_str(prefix->keys.shape()) + "/" +
                              shape_str(prefix->values.shape()) + " incompatible with " +
                              std::to_string(heads) + " heads of width " + std::to_string(dh));
        }
        plen = prefix->len();
    }
    if (probs) *probs = Tensor({heads, len, plen + len});

    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    Tensor ctx({len, cfg.d_model});
    std::vector<float> scores(plen + len);
    auto dot = [dh](const float* a, const float* b) {
        float acc = 0.0f;
        for (std::size_t c = 0; c < dh; ++c) acc += a[c] * b[c];
        return acc;
    };
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < len; ++i) {
            const float* qi = &q.at(h, i, 0);
            const std::size_t visible = plen + i + 1;
            for (std::size_t j = 0; j < plen; ++j) scores[j] = dot(qi, &prefix->keys.at(h, j, 0)) * scale;
            for (std::size_t j = 0; j <= i; ++j) scores[plen + j] = dot(qi, &present_k.at(h, j, 0)) * scale;
            float mx = scores[0];
            for (std::size_t j = 1; j < visible; ++j) mx = std::max(mx, scores[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j < visible; ++j) {
                scores[j] = std::exp(scores[j] - mx);
                sum += scores[j];
            }
            const double inv = 1.0 / sum;
            float* out = &ctx.at(i, h * dh);
            for (std::size_t j = 0; j < visible; ++j) {
                const float p = static_cast<float>(scores[j] * inv);
                if (probs) probs->at(h, i, j) = p;
                const float* vj = j < plen ? &prefix->values.at(h, j, 0)
                                           : &present_v.at(h, j - plen, 0);
                for (std::size_t c = 0; c < dh; ++c) out[c] += p * vj[c];
            }
        }
    }
    Tensor y = kernels::matmul(ctx, w.wo);
    kernels::add_row_bias(y, w.bo);
    return y;
}

struct BlockOutput {
    Tensor x;
    LayerKV present;
};

// Pre-norm block: x + attn(ln1 x), then + mlp(ln2 .).
inline BlockOutput block_forward(const Tensor& x, const LayerWeights& w, const ModelConfig& cfg,
                                 const LayerKV* prefix) {
    Tensor h = kernels::layer_norm(x, w.ln1_gain, w.ln1_bias, cfg.ln_eps);
    QKV qkv = project_qkv(h, w, cfg);
    Tensor attn = attend_with_prefix(qkv.q, qkv.k, qkv.v, prefix, w, cfg);
    Tensor x1 = kernels::add(x, attn);

    Tensor m = kernels::layer_norm(x1, w.ln2_gain, w.ln2_bias, cfg.ln_eps);
    Tensor f = kernels::matmul(m, w.fc_w);
    kernels::add_row_bias(f, w.fc_b);
    f = kernels::gelu(f);
    Tensor p = kernels::matmul(f, w.proj_w);
    kernels::add_row_bias(p, w.proj_b);
    return {kernels::add(x1, p), LayerKV{std::move(qkv.k), std::move(qkv.v)}};
}

struct ForwardOptions {
    std::size_t position_offset{0};
    // Logits are produced only for rows [logits_from, len).
    std::size_t logits_from{0};
    bool compute_logits{true};
};

struct ForwardResult {
    Tensor logits;  // [(len - logits_from) x vocab]
    KVState present;
};

inline Tensor embed(const ModelWeights& model, std::span<const TokenId> tokens,
                    std::size_t position_offset) {
    const auto& cfg = model.config;
    if (tokens.empty()) throw InputError("empty token sequence");
    if (position_offset + tokens.size() > cfg.max_positions) {
        throw CapacityError("sequence of " + std::to_string(tokens.size()) +
                            " tokens at offset " + std::to_string(position_offset) +
                            " exceeds max_positions " + std::to_string(cfg.max_positions));
    }
    Tensor x({tokens.size(), cfg.d_model});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const TokenId id = tokens[i];
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
            throw InputError("token id " + std::to_string(id) + " at index " + std::to_string(i) +
                             " outside vocabulary of " + std::to_string(cfg.vocab_size));
        }
        auto te = model.token_embedding.row(static_cast<std::size_t>(id));
        auto pe = model.position_embedding.row(position_offset + i);
        auto r = x.row(i);
        for (std::size_t c = 0; c < cfg.d_model; ++c) r[c] = te[c] + pe[c];
    }
    return x;
}

inline ForwardResult model_forward(const ModelWeights& model, std::span<const TokenId> tokens,
                                   const KVState* prefix = nullptr,
                                   const ForwardOptions& opts = {}) {
    const auto& cfg = model.config;
    if (prefix) prefix->validate(cfg);
    Tensor x = embed(model, tokens, opts.position_offset);

    ForwardResult out;
    out.present.layers.reserve(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerKV* layer_prefix = prefix ? &prefix->layers[l] : nullptr;
        BlockOutput b = block_forward(x, model.layers[l], cfg, layer_prefix);
        x = std::move(b.x);
        out.present.layers.push_back(std::move(b.present));
    }
    if (opts.compute_logits) {
        Tensor h = kernels::layer_norm(x, model.lnf_gain, model.lnf_bias, cfg.ln_eps);
        out.logits = kernels::matmul_bt(h, model.output_embedding(), opts.logits_from);
    }
    return out;
}

inline ForwardResult model_forward(const ModelWeights& model, std::span<const TokenId> tokens,
                                   const KVState* prefix, std::size_t position_offset) {
    ForwardOptions opts;
    opts.position_offset = position_offset;
    return model_forward(model, tokens, prefix, opts);
}

struct DualFormResult {
    Tensor zsl_term;     // [d_head]
    Tensor icl_term;     // [d_head]
    Tensor linear_full;  // [d_head]
};

// Softmax-free, unscaled attention of test query `j` for one head, split into
// the test-only and demonstration-only contributions. Projections are the
// bias-free W X form so that both terms vanish with their inputs.
inline DualFormResult dual_form_decompose(const Tensor& x_demos, const Tensor& x_test,
                                          const LayerWeights& w, const ModelConfig& cfg,
                                          std::size_t j, std::size_t head = 0) {
    const std::size_t d = cfg.d_model, dh = cfg.d_head();
    if (x_demos.rank() != 2 || x_test.rank() != 2 || x_demos.dim(1) != d || x_test.dim(1) != d) {
        throw DimensionError("dual_form inputs " + shape_str(x_demos.shape()) + "/" +
                             shape_str(x_test.shape()) + " for d_model " + std::to_string(d));
    }
    if (j >= x_test.dim(0)) throw DimensionError("query index outside test rows");
    if (head >= cfg.n_heads) throw DimensionError("head index outside model heads");

    auto head_proj = [&](const Tensor& x, const Tensor& wmat) {
        Tensor flat = kernels::matmul(x, wmat);
        Tensor out({x.dim(0), dh});
        for (std::size_t i = 0; i < x.dim(0); ++i) {
            for (std::size_t c = 0; c < dh; ++c) out.at(i, c) = flat.at(i, head * dh + c);
        }
        return out;
    };
    const Tensor q = head_proj(x_test, w.wq);
    // (W_V X)(W_K X)^T q_j == sum_i v_i (k_i . q_j)
    auto linear_term = [&](const Tensor& x) {
        const Tensor k = head_proj(x, w.wk);
        const Tensor v = head_proj(x, w.wv);
        std::vector<double> acc(dh, 0.0);
        for (std::size_t i = 0; i < x.dim(0); ++i) {
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) s += static_cast<double>(k.at(i, c)) * q.at(j, c);
            for (std::size_t c = 0; c < dh; ++c) acc[c] += v.at(i, c) * s;
        }
        return acc;
    };
    auto to_tensor = [dh](const std::vector<double>& v) {
        Tensor t({dh});
        for (std::size_t c = 0; c < dh; ++c) t[c] = static_cast<float>(v[c]);
        return t;
    };

    Tensor all({x_demos.dim(0) + x_test.dim(0), d});
    std::copy(x_demos.data().begin(), x_demos.data().end(), all.data().begin());
    std::copy(x_test.data().begin(), x_test.data().end(),
              all.data().begin() + static_cast<std::ptrdiff_t>(x_demos.size()));
    return {to_tensor(linear_term(x_test)), to_tensor(linear_term(x_demos)),
            to_tensor(linear_term(all))};
}

}  // namespace dt
