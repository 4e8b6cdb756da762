#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <set>

#include "deepthink/archive.hpp"
#include "deepthink/tokenizer.hpp"
#include "deepthink/transformer.hpp"

namespace dt {

inline constexpr std::string_view kModelMagic = "DTWT0001";

struct LoadedModel {
    ModelWeights weights;
    Tokenizer tokenizer;
    Fingerprint fingerprint;
};

namespace model_io_detail {

template <class W, class F>
void for_each_tensor(W& w, F&& f) {
    f("wte.weight", w.token_embedding);
    f("wpe.weight", w.position_embedding);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        auto& L = w.layers[l];
        const std::string p = "h." + std::to_string(l) + ".";
        f(p + "ln_1.weight", L.ln1_gain);
        f(p + "ln_1.bias", L.ln1_bias);
        f(p + "attn.q.weight", L.wq);
        f(p + "attn.q.bias", L.bq);
        f(p + "attn.k.weight", L.wk);
        f(p + "attn.k.bias", L.bk);
        f(p + "attn.v.weight", L.wv);
        f(p + "attn.v.bias", L.bv);
        f(p + "attn.o.weight", L.wo);
        f(p + "attn.o.bias", L.bo);
        f(p + "ln_2.weight", L.ln2_gain);
        f(p + "ln_2.bias", L.ln2_bias);
        f(p + "mlp.fc.weight", L.fc_w);
        f(p + "mlp.fc.bias", L.fc_b);
        f(p + "mlp.proj.weight", L.proj_w);
        f(p + "mlp.proj.bias", L.proj_b);
    }
    f("ln_f.weight", w.lnf_gain);
    f("ln_f.bias", w.lnf_bias);
    if (w.unembedding) f("lm_head.weight", *w.unembedding);
}

}  // namespace model_io_detail

inline json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},         {"n_heads", c.n_heads},
            {"d_model", c.d_model},           {"vocab_size", c.vocab_size},
            {"max_positions", c.max_positions}, {"ffn_hidden", c.ffn_hidden},
            {"ln_eps", c.ln_eps}};
}

inline ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_positions = j.at("max_positions").get<std::size_t>();
    c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
    c.ln_eps = j.at("ln_eps").get<float>();
    return c;
}

// config hash XOR checksum over the weight bytes in canonical tensor order.
inline Fingerprint fingerprint(const ModelWeights& w) {
    Fnv1a64 ch;
    ch.update(config_to_json(w.config).dump());
    Fnv1a64 wh;
    model_io_detail::for_each_tensor(w, [&](const std::string& name, const Tensor& t) {
        wh.update(name);
        wh.update(t.data().data(), t.size() * sizeof(float));
    });
    return {ch.digest(), wh.digest()};
}

inline void save_model(const ModelWeights& w, const Tokenizer& tok,
                       const std::filesystem::path& path) {
    w.validate();
    std::vector<NamedTensor> tensors;
    model_io_detail::for_each_tensor(
        w, [&](const std::string& name, const Tensor& t) { tensors.push_back({name, &t}); });
    json meta = {{"config", config_to_json(w.config)},
                 {"tied_unembedding", !w.unembedding.has_value()},
                 {"tokenizer", tok.to_json()}};
    write_archive(path, kModelMagic, meta, tensors);
}

inline LoadedModel load_model(const std::filesystem::path& path) {
    Archive ar = read_archive(path, kModelMagic.substr(0, 4));
    LoadedModel out;
    try {
        out.weights.config = config_from_json(ar.metadata.at("config"));
        out.weights.config.validate();
        out.tokenizer = Tokenizer::from_json(ar.metadata.value("tokenizer", json{{"type", "byte"}}));
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": malformed model metadata: " + e.what());
    }
    out.weights.layers.resize(out.weights.config.n_layers);
    if (ar.tensors.count("lm_head.weight")) out.weights.unembedding = Tensor();

    std::set<std::string> expected;
    model_io_detail::for_each_tensor(out.weights, [&](const std::string& name, Tensor& t) {
        expected.insert(name);
        auto it = ar.tensors.find(name);
        if (it == ar.tensors.end()) throw FormatError(path.string() + ": missing tensor " + name);
        t = std::move(it->second);
    });
    for (const auto& [name, _] : ar.tensors) {
        if (!expected.count(name)) throw FormatError(path.string() + ": unexpected tensor " + name);
    }
    try {
        out.weights.validate();
    } catch (const ConfigError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (out.tokenizer.min_vocab() > out.weights.config.vocab_size) {
        throw FormatError(path.string() + ": tokenizer needs a vocabulary of " +
                          std::to_string(out.tokenizer.min_vocab()));
    }
    out.fingerprint = fingerprint(out.weights);
    return out;
}

// Uniform(-scale, scale) weights from a seeded mt19937_64 so that tiny test
// models are identical on every platform. Layer-norm gains start at 1.
inline ModelWeights random_weights(const ModelConfig& cfg, std::uint64_t seed, float scale = 0.3f) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    auto uniform = [&] {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        return static_cast<float>((2.0 * u - 1.0) * scale);
    };
    auto rand_t = [&](Shape s) {
        Tensor t(std::move(s));
        for (float& v : t.data()) v = uniform();
        return t;
    };
    auto ones = [](std::size_t n) {
        Tensor t({n});
        for (float& v : t.data()) v = 1.0f;
        return t;
    };
    const auto d = cfg.d_model, f = cfg.ffn_hidden;
    ModelWeights w;
    w.config = cfg;
    w.token_embedding = rand_t({cfg.vocab_size, d});
    w.position_embedding = rand_t({cfg.max_positions, d});
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerWeights L;
        L.ln1_gain = ones(d);
        L.ln1_bias = rand_t({d});
        L.wq = rand_t({d, d});
        L.bq = rand_t({d});
        L.wk = rand_t({d, d});
        L.bk = rand_t({d});
        L.wv = rand_t({d, d});
        L.bv = rand_t({d});
        L.wo = rand_t({d, d});
        L.bo = rand_t({d});
        L.ln2_gain = ones(d);
        L.ln2_bias = rand_t({d});
        L.fc_w = rand_t({d, f});
        L.fc_b = rand_t({f});
        L.proj_w = rand_t({f, d});
        L.proj_b = rand_t({d});
        w.layers.push_back(std::move(L));
    }
    w.lnf_gain = ones(d);
    w.lnf_bias = rand_t({d});
    return w;
}

}  // namespace dt
