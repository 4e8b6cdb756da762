#pragma once

#include <filesystem>
#include <string>

#include "deepthink/archive.hpp"
#include "deepthink/transformer.hpp"

namespace dt {

inline constexpr std::string_view kKvMagic = "DTKV0001";

inline std::string kv_tensor_name(std::size_t layer, char which) {
    return "layer" + std::to_string(layer) + "." + which;
}

// KV state plus the free-form metadata stored next to it (demo tokens,
// thinking hyper-parameters).
struct KVArchive {
    KVState state;
    Fingerprint fingerprint;
    json extra = json::object();
};

inline void save_kv(const KVState& state, const Fingerprint& fp, const std::filesystem::path& path,
                    const json& extra = json::object()) {
    std::vector<NamedTensor> tensors;
    for (std::size_t l = 0; l < state.layers.size(); ++l) {
        tensors.push_back({kv_tensor_name(l, 'k'), &state.layers[l].keys});
        tensors.push_back({kv_tensor_name(l, 'v'), &state.layers[l].values});
    }
    json meta = {{"step", state.step},
                 {"n_layers", state.layers.size()},
                 {"fingerprint", fp.hex()},
                 {"config_hash", fp.config_hash},
                 {"weight_checksum", fp.weight_checksum},
                 {"extra", extra}};
    write_archive(path, kKvMagic, meta, tensors);
}

inline KVArchive load_kv_archive(const std::filesystem::path& path) {
    Archive ar = read_archive(path, kKvMagic.substr(0, 4));
    KVArchive out;
    try {
        out.fingerprint.config_hash = ar.metadata.at("config_hash").get<std::uint64_t>();
        out.fingerprint.weight_checksum = ar.metadata.at("weight_checksum").get<std::uint64_t>();
        out.state.step = ar.metadata.at("step").get<std::size_t>();
        const auto n_layers = ar.metadata.at("n_layers").get<std::size_t>();
        out.extra = ar.metadata.value("extra", json::object());
        if (ar.tensors.size() != 2 * n_layers) {
            throw FormatError(path.string() + ": expected " + std::to_string(2 * n_layers) +
                              " tensors, found " + std::to_string(ar.tensors.size()));
        }
        for (std::size_t l = 0; l < n_layers; ++l) {
            auto k = ar.tensors.find(kv_tensor_name(l, 'k'));
            auto v = ar.tensors.find(kv_tensor_name(l, 'v'));
            if (k == ar.tensors.end() || v == ar.tensors.end()) {
                throw FormatError(path.string() + ": missing tensors for layer " + std::to_string(l));
            }
            if (k->second.rank() != 3 || k->second.shape() != v->second.shape() ||
                (l > 0 && k->second.dim(1) != out.state.len())) {
                throw FormatError(path.string() + ": inconsistent kv shapes at layer " +
                                  std::to_string(l));
            }
            out.state.layers.push_back({std::move(k->second), std::move(v->second)});
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": malformed kv metadata: " + e.what());
    }
    return out;
}

inline KVState load_kv(const std::filesystem::path& path, const Fingerprint& expected) {
    KVArchive ar = load_kv_archive(path);
    if (!(ar.fingerprint == expected)) {
        throw CompatibilityError(path.string() + ": kv archive fingerprint " + ar.fingerprint.hex() +
                                 " does not match model fingerprint " + expected.hex());
    }
    return std::move(ar.state);
}

}  // namespace dt
