#include <gtest/gtest.h>

#include "deepthink/tokenizer.hpp"

using namespace dt;

namespace {
std::vector<std::string> pieces(std::string_view s) {
    std::vector<std::string> out;
    for (auto p : gpt2_pretokenize(s)) out.emplace_back(p);
    return out;
}
}  // namespace

TEST(Pretokenize, WordsKeepLeadingSpace) {
    EXPECT_EQ(pieces("Review: a fine film"),
              (std::vector<std::string>{"Review", ":", " a", " fine", " film"}));
}

TEST(Pretokenize, ContractionsDigitsAndPunctuation) {
    EXPECT_EQ(pieces("it's 42 times!!"),
              (std::vector<std::string>{"it", "'s", " 42", " times", "!!"}));
}

TEST(Pretokenize, WhitespaceRuns) {
    // "\s+(?!\S)" leaves the final space of a run for the following word.
    EXPECT_EQ(pieces("a  b"), (std::vector<std::string>{"a", " ", " b"}));
    EXPECT_EQ(pieces("x\n\nSentiment:"), (std::vector<std::string>{"x", "\n", "\n", "Sentiment", ":"}));
    EXPECT_EQ(pieces("end  "), (std::vector<std::string>{"end", "  "}));
}

TEST(Pretokenize, PiecesConcatenateToInput) {
    const std::string s = "Question: What's the  capital\tof France? It's Paris, 1789...\n\n";
    std::string joined;
    for (auto p : gpt2_pretokenize(s)) joined += p;
    EXPECT_EQ(joined, s);
}

TEST(ByteTokenizer, IdsAreBytes) {
    const auto ids = Tokenizer::bytes().encode("A\xff");
    EXPECT_EQ(ids, (std::vector<TokenId>{65, 255}));
}

TEST(Gpt2Tokenizer, AppliesMergesByRank) {
    // byte symbols: ' ' -> "Ġ"
    std::unordered_map<std::string, TokenId> vocab{
        {"l", 0}, {"o", 1}, {"w", 2}, {"e", 3}, {"r", 4}, {"lo", 5}, {"low", 6},
        {"er", 7}, {"Ġ", 8}, {"Ġlow", 9}, {"Ġl", 10}};
    const std::vector<std::string> merges{"l o", "lo w", "e r", "Ġ l", "Ġl ow"};
    // "l o" outranks "Ġ l", so " low" ends as Ġ + low.
    const Tokenizer tok = Tokenizer::gpt2(vocab, merges);
    EXPECT_EQ(tok.encode("lower"), (std::vector<TokenId>{6, 7}));
    EXPECT_EQ(tok.encode(" low"), (std::vector<TokenId>{8, 6}));
}

TEST(Gpt2Tokenizer, JsonRoundtrip) {
    std::unordered_map<std::string, TokenId> vocab{{"a", 0}, {"b", 1}, {"ab", 2}};
    const Tokenizer tok = Tokenizer::gpt2(vocab, {"a b"});
    const Tokenizer back = Tokenizer::from_json(tok.to_json());
    EXPECT_EQ(back.encode("abab"), (std::vector<TokenId>{2, 2}));
    EXPECT_EQ(back.min_vocab(), 3u);
    EXPECT_THROW(back.encode("c"), InputError);
}
