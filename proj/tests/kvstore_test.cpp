#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "deepthink/deepthink.hpp"
#include "deepthink/kvstore.hpp"
#include "deepthink/model_io.hpp"
#include "test_util.hpp"

using namespace dt;
using dt::tu::bit_identical;
using dt::tu::random_tensor;

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "deepthink_kvstore_test";
    fs::create_directories(dir);
    return dir / name;
}

KVState random_state(std::size_t layers, std::size_t heads, std::size_t len, std::size_t dh,
                     std::uint64_t seed) {
    KVState s;
    s.step = 1 + seed % 7;
    for (std::size_t l = 0; l < layers; ++l)
        s.layers.push_back({random_tensor({heads, len, dh}, seed * 31 + l, -5, 5),
                            random_tensor({heads, len, dh}, seed * 37 + l, -5, 5)});
    return s;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
}

const Fingerprint kFp{0x1234, 0xabcd};

}  // namespace

TEST(KvStore, RoundtripIsBitIdentical) {
    const KVState s = random_state(2, 2, 5, 8, 1);
    const fs::path p = scratch("roundtrip.dtkv");
    save_kv(s, kFp, p);
    EXPECT_TRUE(bit_identical(load_kv(p, kFp), s));
}

TEST(KvStore, RoundtripRandomShapes) {
    std::mt19937_64 rng(123);
    for (int trial = 0; trial < 25; ++trial) {
        const KVState s = random_state(1 + rng() % 4, 1 + rng() % 3, 1 + rng() % 20, 1 + rng() % 9, rng());
        const fs::path p = scratch("random.dtkv");
        save_kv(s, kFp, p);
        EXPECT_TRUE(bit_identical(load_kv(p, kFp), s));
    }
}

TEST(KvStore, TwoLayerHeaderListsFourRecords) {
    const fs::path p = scratch("two_layer.dtkv");
    save_kv(random_state(2, 2, 3, 4, 2), kFp, p);
    const Archive ar = read_archive(p, "DTKV");
    ASSERT_EQ(ar.records.size(), 4u);
    std::set<std::string> names;
    for (const auto& r : ar.records) names.insert(r.name);
    EXPECT_EQ(names, (std::set<std::string>{"layer0.k", "layer0.v", "layer1.k", "layer1.v"}));
}

TEST(KvStore, HeaderWalkFromRawBytes) {
    const fs::path p = scratch("walk.dtkv");
    const KVState s = random_state(3, 2, 4, 2, 3);
    save_kv(s, kFp, p);
    const std::string bytes = read_bytes(p);
    ASSERT_EQ(bytes.substr(0, 8), "DTKV0001");
    std::uint64_t hlen = 0;
    for (int i = 7; i >= 0; --i) hlen = (hlen << 8) | static_cast<unsigned char>(bytes[8 + i]);
    const auto header = json::parse(bytes.substr(16, hlen));
    EXPECT_EQ(header["metadata"]["step"], s.step);
    EXPECT_EQ(header["metadata"]["fingerprint"], kFp.hex());
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    for (const auto& [name, rec] : header["tensors"].items()) {
        EXPECT_EQ(rec["dtype"], "f32");
        std::uint64_t n = 4;
        for (auto e : rec["shape"]) n *= e.get<std::uint64_t>();
        EXPECT_EQ(rec["length"].get<std::uint64_t>(), n);
        spans.emplace_back(rec["offset"], rec["length"]);
    }
    std::sort(spans.begin(), spans.end());
    std::uint64_t end = 0;
    for (auto [off, len] : spans) {
        EXPECT_GE(off, end);
        end = off + len;
    }
    EXPECT_EQ(16 + hlen + end, bytes.size());
}

TEST(KvStore, WrongMagicIsFormatError) {
    const fs::path p = scratch("magic.dtkv");
    save_kv(random_state(1, 1, 2, 2, 4), kFp, p);
    std::string bytes = read_bytes(p);
    bytes[0] = 'X';
    write_bytes(p, bytes);
    EXPECT_THROW(load_kv(p, kFp), FormatError);
    bytes[0] = 'D';
    bytes[7] = '9';
    write_bytes(p, bytes);
    EXPECT_THROW(load_kv(p, kFp), FormatError);
}

TEST(KvStore, FingerprintMismatchNamesBoth) {
    const fs::path p = scratch("fp.dtkv");
    save_kv(random_state(1, 1, 2, 2, 5), kFp, p);
    const Fingerprint other{0x1234, 0xabce};
    try {
        load_kv(p, other);
        FAIL() << "expected CompatibilityError";
    } catch (const CompatibilityError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find(kFp.hex()), std::string::npos);
        EXPECT_NE(msg.find(other.hex()), std::string::npos);
    }
}

TEST(KvStore, TruncationIsCorruption) {
    const fs::path p = scratch("trunc.dtkv");
    save_kv(random_state(2, 1, 3, 2, 6), kFp, p);
    const std::string bytes = read_bytes(p);
    for (std::size_t keep : {bytes.size() - 1, bytes.size() - 20, std::size_t{40}, std::size_t{10}}) {
        write_bytes(p, bytes.substr(0, keep));
        EXPECT_THROW(load_kv(p, kFp), CorruptionError) << keep;
    }
}

TEST(KvStore, MissingFileIsIoError) {
    EXPECT_THROW(load_kv(scratch("does_not_exist.dtkv"), kFp), IoError);
    EXPECT_THROW(save_kv(random_state(1, 1, 1, 1, 1), kFp, "/nonexistent_dir/x.dtkv"), IoError);
}

TEST(KvStore, DeepThinkResultRoundtrip) {
    const ModelConfig cfg = tu::tiny_config();
    const ModelWeights w = random_weights(cfg, 3);
    const Fingerprint fp = fingerprint(w);
    std::mt19937_64 rng(3);
    const auto demo = tu::random_tokens(11, cfg.vocab_size, rng);
    ThinkConfig tc;
    tc.steps = 3;
    const ThinkResult r = deep_think(w, demo, tc);
    const fs::path p = scratch("think.dtkv");
    save_kv(r.final, fp, p, {{"demo_tokens", demo}});
    const KVArchive ar = load_kv_archive(p);
    EXPECT_TRUE(bit_identical(ar.state, r.final));
    EXPECT_EQ(ar.state.step, 3u);
    EXPECT_EQ(ar.extra["demo_tokens"].get<std::vector<TokenId>>(), demo);
    EXPECT_NO_THROW(ar.state.validate(cfg));
}

TEST(Fingerprint, SensitiveToConfigAndWeights) {
    const ModelConfig cfg = tu::tiny_config();
    ModelWeights w = random_weights(cfg, 3);
    const Fingerprint a = fingerprint(w);
    EXPECT_EQ(a, fingerprint(random_weights(cfg, 3)));
    w.layers[1].bk[0] += 1e-3f;
    EXPECT_NE(a.weight_checksum, fingerprint(w).weight_checksum);
    EXPECT_EQ(a.config_hash, fingerprint(w).config_hash);
    ModelConfig c2 = cfg;
    c2.ln_eps = 1e-6f;
    ModelWeights w2 = random_weights(c2, 3);
    EXPECT_NE(a.config_hash, fingerprint(w2).config_hash);
}

TEST(ModelArchive, RoundtripAndStrictNames) {
    const ModelConfig cfg = tu::tiny_config(300);
    const ModelWeights w = random_weights(cfg, 12);
    const fs::path p = scratch("model.dtwt");
    save_model(w, Tokenizer::bytes(), p);
    const LoadedModel m = load_model(p);
    EXPECT_EQ(m.weights.config, cfg);
    EXPECT_EQ(m.fingerprint, fingerprint(w));
    EXPECT_TRUE(bit_identical(m.weights.layers[1].fc_w, w.layers[1].fc_w));
    EXPECT_FALSE(m.weights.unembedding.has_value());

    // extra tensor
    Archive ar = read_archive(p, "DTWT");
    std::vector<NamedTensor> named;
    for (const auto& r : ar.records) named.push_back({r.name, &ar.tensors.at(r.name)});
    const Tensor extra({2});
    auto with_extra = named;
    with_extra.push_back({"h.9.bogus", &extra});
    write_archive(scratch("extra.dtwt"), "DTWT0001", ar.metadata, with_extra);
    EXPECT_THROW(load_model(scratch("extra.dtwt")), FormatError);

    // missing tensor
    auto missing = named;
    std::erase_if(missing, [](const NamedTensor& n) { return n.name == "h.1.attn.v.bias"; });
    write_archive(scratch("missing.dtwt"), "DTWT0001", ar.metadata, missing);
    try {
        load_model(scratch("missing.dtwt"));
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("h.1.attn.v.bias"), std::string::npos);
    }

    // a KV archive is not a model archive
    save_kv(random_state(1, 1, 1, 1, 1), kFp, scratch("not_model.dtkv"));
    EXPECT_THROW(load_model(scratch("not_model.dtkv")), FormatError);
}

TEST(ModelArchive, ByteTokenizerNeedsFullByteVocab) {
    const ModelConfig cfg = tu::tiny_config(32);
    const fs::path p = scratch("small_vocab.dtwt");
    save_model(random_weights(cfg, 1), Tokenizer::bytes(), p);
    EXPECT_THROW(load_model(p), FormatError);
}
