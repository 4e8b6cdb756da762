#pragma once

// Reference logits exported by the checkpoint converter. One JSON object per
// line:
//   {"prompt": "...", "tokens": [ids...]?, "logits": "<base64 of f32 LE>"}
// `logits` holds the final-position logits, vocab_size floats. When `tokens`
// is absent the prompt is encoded with the model's tokenizer.

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "deepthink/tokenizer.hpp"
#include "deepthink/transformer.hpp"

namespace dt {

inline std::vector<unsigned char> base64_decode(std::string_view in) {
    std::array<int, 256> table;
    table.fill(-1);
    const char* alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    for (int i = 0; i < 64; ++i) table[static_cast<unsigned char>(alphabet[i])] = i;
    std::vector<unsigned char> out;
    unsigned buf = 0;
    int bits = 0;
    for (char ch : in) {
        if (ch == '=') break;
        if (ch == '\n' || ch == '\r') continue;
        const int v = table[static_cast<unsigned char>(ch)];
        if (v < 0) throw FormatError("invalid base64 character");
        buf = (buf << 6) | static_cast<unsigned>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((buf >> bits) & 0xFF));
        }
    }
    return out;
}

inline std::string base64_encode(std::span<const unsigned char> in) {
    const char* alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    std::size_t i = 0;
    for (; i + 2 < in.size(); i += 3) {
        const unsigned v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
        for (int s = 18; s >= 0; s -= 6) out += alphabet[(v >> s) & 0x3F];
    }
    if (const std::size_t rest = in.size() - i; rest) {
        unsigned v = in[i] << 16;
        if (rest == 2) v |= in[i + 1] << 8;
        out += alphabet[(v >> 18) & 0x3F];
        out += alphabet[(v >> 12) & 0x3F];
        out += rest == 2 ? alphabet[(v >> 6) & 0x3F] : '=';
        out += '=';
    }
    return out;
}

struct GoldenRecord {
    std::string prompt;
    std::vector<TokenId> tokens;
    std::vector<float> logits;
};

inline std::vector<GoldenRecord> load_golden(const std::filesystem::path& path,
                                             const Tokenizer& tok) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open golden file " + path.string());
    std::vector<GoldenRecord> out;
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            GoldenRecord r;
            r.prompt = j.at("prompt").get<std::string>();
            r.tokens = j.contains("tokens") ? j["tokens"].get<std::vector<TokenId>>()
                                            : tok.encode(r.prompt);
            const auto bytes = base64_decode(j.at("logits").get<std::string>());
            if (bytes.size() % sizeof(float)) throw FormatError("logit bytes not a multiple of 4");
            r.logits.resize(bytes.size() / sizeof(float));
            std::memcpy(r.logits.data(), bytes.data(), bytes.size());
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(lineno, e.what());
        } catch (const FormatError& e) {
            throw ParseError(lineno, e.what());
        }
    }
    return out;
}

// Largest absolute difference between engine and reference final logits.
inline float golden_max_abs_diff(const ModelWeights& model, const GoldenRecord& rec) {
    if (rec.logits.size() != model.config.vocab_size) {
        throw DimensionError("golden logits of width " + std::to_string(rec.logits.size()) +
                             " for vocab " + std::to_string(model.config.vocab_size));
    }
    ForwardOptions opts;
    opts.logits_from = rec.tokens.size() - 1;
    const auto fwd = model_forward(model, rec.tokens, nullptr, opts);
    float worst = 0.0f;
    for (std::size_t i = 0; i < rec.logits.size(); ++i) {
        worst = std::max(worst, std::fabs(fwd.logits[i] - rec.logits[i]));
    }
    return worst;
}

}  // namespace dt
