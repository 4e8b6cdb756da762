#pragma once

// Single-file tensor container shared by KV archives (DTKV) and model
// archives (DTWT):
//
//   [8 bytes]  magic, 4-char kind + 4-digit version, e.g. "DTKV0001"
//   [8 bytes]  little-endian u64 header length H
//   [H bytes]  UTF-8 JSON header
//   [...]      raw little-endian f32 tensor bytes
//
// Header: {"format_version":1, "metadata":{...},
//          "tensors":{name:{"dtype":"f32","shape":[...],"offset":o,"length":n}}}
// Offsets count from the first byte after the header.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "deepthink/tensor.hpp"

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace dt {

using json = nlohmann::json;

inline constexpr std::size_t kMagicSize = 8;
inline constexpr std::size_t kPreambleSize = kMagicSize + 8;

struct Fingerprint {
    std::uint64_t config_hash{0};
    std::uint64_t weight_checksum{0};

    std::uint64_t value() const { return config_hash ^ weight_checksum; }

    std::string hex() const {
        std::ostringstream os;
        os << std::hex << std::setw(16) << std::setfill('0') << value();
        return os.str();
    }

    friend bool operator==(const Fingerprint&, const Fingerprint&) = default;
};

// FNV-1a, 64-bit.
class Fnv1a64 {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    std::uint64_t digest() const { return state_; }

private:
    std::uint64_t state_{0xcbf29ce484222325ULL};
};

struct TensorRecord {
    std::string name;
    Shape shape;
    std::uint64_t offset{0};
    std::uint64_t length{0};
};

struct NamedTensor {
    std::string name;
    const Tensor* tensor;
};

struct Archive {
    json metadata;
    std::vector<TensorRecord> records;  // in offset order
    std::map<std::string, Tensor> tensors;
};

inline void write_archive(const std::filesystem::path& path, std::string_view magic,
                          const json& metadata, const std::vector<NamedTensor>& tensors) {
    if (magic.size() != kMagicSize) throw FormatError("archive magic must be 8 bytes");
    json header;
    header["format_version"] = 1;
    header["metadata"] = metadata;
    header["tensors"] = json::object();
    std::uint64_t offset = 0;
    for (const auto& nt : tensors) {
        if (header["tensors"].contains(nt.name)) throw FormatError("duplicate tensor " + nt.name);
        const std::uint64_t length = nt.tensor->size() * sizeof(float);
        header["tensors"][nt.name] = {
            {"dtype", "f32"}, {"shape", nt.tensor->shape()}, {"offset", offset}, {"length", length}};
        offset += length;
    }
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    const std::uint64_t hlen = text.size();
    out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
    out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& nt : tensors) {
        out.write(reinterpret_cast<const char*>(nt.tensor->data().data()),
                  static_cast<std::streamsize>(nt.tensor->size() * sizeof(float)));
    }
    out.flush();
    if (!out) throw IoError("write failed for " + path.string());
}

// `kind` is the 4-char family ("DTKV"/"DTWT"); the version suffix must be 0001.
inline Archive read_archive(const std::filesystem::path& path, std::string_view kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::error_code ec;
    const std::uint64_t file_size = std::filesystem::file_size(path, ec);
    if (ec) throw IoError("cannot stat " + path.string() + ": " + ec.message());
    if (file_size < kPreambleSize) throw CorruptionError(path.string() + ": truncated preamble");

    char magic[kMagicSize];
    in.read(magic, kMagicSize);
    const std::string_view m(magic, kMagicSize);
    if (m.substr(0, 4) != kind) {
        throw FormatError(path.string() + ": bad magic, expected " + std::string(kind));
    }
    if (m.substr(4) != "0001") {
        throw FormatError(path.string() + ": unsupported format version " + std::string(m.substr(4)));
    }
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
    if (hlen > file_size - kPreambleSize) throw CorruptionError(path.string() + ": truncated header");
    std::string text(hlen, '\0');
    in.read(text.data(), static_cast<std::streamsize>(hlen));

    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": malformed header: " + e.what());
    }
    if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_object()) {
        throw FormatError(path.string() + ": header lacks tensor table");
    }

    Archive ar;
    ar.metadata = header.value("metadata", json::object());
    const std::uint64_t data_start = kPreambleSize + hlen;
    const std::uint64_t data_size = file_size - data_start;
    try {
        for (const auto& [name, rec] : header["tensors"].items()) {
            if (rec.at("dtype").get<std::string>() != "f32") {
                throw FormatError(path.string() + ": tensor " + name + " has unsupported dtype");
            }
            TensorRecord r{name, rec.at("shape").get<Shape>(), rec.at("offset").get<std::uint64_t>(),
                           rec.at("length").get<std::uint64_t>()};
            if (r.length != shape_numel(r.shape) * sizeof(float)) {
                throw FormatError(path.string() + ": tensor " + name + " length disagrees with shape");
            }
            if (r.offset > data_size || r.length > data_size - r.offset) {
                throw CorruptionError(path.string() + ": tensor " + name + " runs past end of file");
            }
            ar.records.push_back(std::move(r));
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": malformed tensor record: " + e.what());
    }
    std::sort(ar.records.begin(), ar.records.end(),
              [](const TensorRecord& a, const TensorRecord& b) { return a.offset < b.offset; });
    for (std::size_t i = 1; i < ar.records.size(); ++i) {
        const auto& prev = ar.records[i - 1];
        if (prev.offset + prev.length > ar.records[i].offset) {
            throw CorruptionError(path.string() + ": tensors " + prev.name + " and " +
                                  ar.records[i].name + " overlap");
        }
    }
    for (const auto& r : ar.records) {
        std::vector<float> values(r.length / sizeof(float));
        in.seekg(static_cast<std::streamoff>(data_start + r.offset));
        in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(r.length));
        if (!in) throw CorruptionError(path.string() + ": short read for " + r.name);
        ar.tensors.emplace(r.name, Tensor(r.shape, std::move(values)));
    }
    return ar;
}

}  // namespace dt
