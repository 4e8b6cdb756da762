#pragma once

// Text -> token ids. Two schemes:
//   byte      id == byte value (vocab >= 256); used by randomly initialised models
//   gpt2_bpe  byte-level BPE with a GPT-2 style pre-tokenizer; vocab and merges
//             ship in the model archive metadata
//
// The pre-tokenizer classifies ASCII only; every byte >= 0x80 counts as a
// letter, which matches the reference regex for Latin text.

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "deepthink/error.hpp"
#include "deepthink/transformer.hpp"

namespace dt {

namespace bpe_detail {

// The GPT-2 byte <-> printable code point table.
inline std::vector<std::string> byte_symbols() {
    std::vector<int> cps(256, -1);
    auto keep = [&](int lo, int hi) {
        for (int b = lo; b <= hi; ++b) cps[b] = b;
    };
    keep('!', '~');
    keep(0xA1, 0xAC);
    keep(0xAE, 0xFF);
    int extra = 0;
    for (int b = 0; b < 256; ++b) {
        if (cps[b] < 0) cps[b] = 256 + extra++;
    }
    std::vector<std::string> out(256);
    for (int b = 0; b < 256; ++b) {
        const auto cp = static_cast<unsigned>(cps[b]);
        std::string s;
        if (cp < 0x80) {
            s.push_back(static_cast<char>(cp));
        } else {
            s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
            s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        }
        out[static_cast<std::size_t>(b)] = std::move(s);
    }
    return out;
}

inline bool is_space(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}
inline bool is_letter(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80;
}
inline bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }

}  // namespace bpe_detail

// Splits text the way GPT-2's pattern
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
// does.
inline std::vector<std::string_view> gpt2_pretokenize(std::string_view text) {
    using namespace bpe_detail;
    std::vector<std::string_view> out;
    const std::size_t n = text.size();
    auto at = [&](std::size_t i) { return static_cast<unsigned char>(text[i]); };
    std::size_t i = 0;
    while (i < n) {
        if (text[i] == '\'') {
            bool matched = false;
            for (std::string_view c : {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"}) {
                if (text.substr(i, c.size()) == c) {
                    out.push_back(text.substr(i, c.size()));
                    i += c.size();
                    matched = true;
                    break;
                }
            }
            if (matched) continue;
        }
        std::size_t start = i;
        std::size_t j = i;
        if (at(j) == ' ' && j + 1 < n && !is_space(at(j + 1))) ++j;
        if (j < n && !is_space(at(j))) {
            auto cls = [&](unsigned char c) { return is_letter(c) ? 0 : is_digit(c) ? 1 : 2; };
            const int k = cls(at(j));
            while (j < n && !is_space(at(j)) && cls(at(j)) == k) ++j;
            out.push_back(text.substr(start, j - start));
            i = j;
            continue;
        }
        // Whitespace run. Leave its last character for the next token when the
        // run is followed by non-space.
        j = i;
        while (j < n && is_space(at(j))) ++j;
        if (j < n && j - i > 1) {
            out.push_back(text.substr(i, j - 1 - i));
            i = j - 1;
        } else {
            out.push_back(text.substr(i, j - i));
            i = j;
        }
    }
    return out;
}

class Tokenizer {
public:
    enum class Kind { Byte, Gpt2Bpe };

    static Tokenizer bytes() { return Tokenizer(); }

    static Tokenizer gpt2(std::unordered_map<std::string, TokenId> vocab,
                          const std::vector<std::string>& merges) {
        Tokenizer t;
        t.kind_ = Kind::Gpt2Bpe;
        t.vocab_ = std::move(vocab);
        t.symbols_ = bpe_detail::byte_symbols();
        for (std::size_t r = 0; r < merges.size(); ++r) {
            const auto sp = merges[r].find(' ');
            if (sp == std::string::npos) throw FormatError("merge without separator: " + merges[r]);
            t.ranks_.emplace(std::make_pair(merges[r].substr(0, sp), merges[r].substr(sp + 1)), r);
        }
        t.merges_ = merges;
        return t;
    }

    static Tokenizer from_json(const nlohmann::json& j) {
        const auto type = j.value("type", std::string("byte"));
        if (type == "byte") return bytes();
        if (type == "gpt2_bpe") {
            return gpt2(j.at("vocab").get<std::unordered_map<std::string, TokenId>>(),
                        j.at("merges").get<std::vector<std::string>>());
        }
        throw FormatError("unknown tokenizer type " + type);
    }

    nlohmann::json to_json() const {
        if (kind_ == Kind::Byte) return {{"type", "byte"}};
        nlohmann::json vocab(std::map<std::string, TokenId>(vocab_.begin(), vocab_.end()));
        return {{"type", "gpt2_bpe"}, {"vocab", vocab}, {"merges", merges_}};
    }

    Kind kind() const { return kind_; }

    std::size_t min_vocab() const {
        if (kind_ == Kind::Byte) return 256;
        TokenId mx = 0;
        for (const auto& [_, id] : vocab_) mx = std::max(mx, id);
        return static_cast<std::size_t>(mx) + 1;
    }

    std::vector<TokenId> encode(std::string_view text) const {
        std::vector<TokenId> ids;
        if (kind_ == Kind::Byte) {
            for (char c : text) ids.push_back(static_cast<unsigned char>(c));
            return ids;
        }
        for (std::string_view piece : gpt2_pretokenize(text)) {
            for (const auto& tok : bpe(piece)) {
                auto it = vocab_.find(tok);
                if (it == vocab_.end()) throw InputError("bpe symbol missing from vocab: " + tok);
                ids.push_back(it->second);
            }
        }
        return ids;
    }

private:
    std::vector<std::string> bpe(std::string_view piece) const {
        std::vector<std::string> parts;
        for (char c : piece) parts.push_back(symbols_[static_cast<unsigned char>(c)]);
        while (parts.size() > 1) {
            std::size_t best = std::numeric_limits<std::size_t>::max(), at = 0;
            for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
                auto it = ranks_.find({parts[i], parts[i + 1]});
                if (it != ranks_.end() && it->second < best) {
                    best = it->second;
                    at = i;
                }
            }
            if (best == std::numeric_limits<std::size_t>::max()) break;
            // Merge every occurrence of the winning pair, left to right.
            const std::string a = parts[at], b = parts[at + 1];
            std::vector<std::string> next;
            for (std::size_t i = 0; i < parts.size();) {
                if (i + 1 < parts.size() && parts[i] == a && parts[i + 1] == b) {
                    next.push_back(a + b);
                    i += 2;
                } else {
                    next.push_back(parts[i++]);
                }
            }
            parts = std::move(next);
        }
        return parts;
    }

    Kind kind_{Kind::Byte};
    std::unordered_map<std::string, TokenId> vocab_;
    std::vector<std::string> merges_;
    std::vector<std::string> symbols_;
    std::map<std::pair<std::string, std::string>, std::size_t> ranks_;
};

}  // namespace dt
