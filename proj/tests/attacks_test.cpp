#include <gtest/gtest.h>

#include <cmath>
#include <nlohmann/json.hpp>

#include "capwm/attacks/attacks.hpp"
#include "support.hpp"

namespace capwm {
namespace {

using testing::FunctionModel;
using testing::hashed_model;
using testing::random_tokens;

// Classes of four consecutive tokens, plus singletons for the last two.
SynonymTable blocks(int vocab) {
  std::vector<int> c(static_cast<std::size_t>(vocab));
  for (int t = 0; t < vocab; ++t) c[static_cast<std::size_t>(t)] = t < vocab - 2 ? t / 4 : 1000 + t;
  return SynonymTable(c);
}

bool is_subsequence(const TokenSeq& small, const TokenSeq& big) {
  std::size_t j = 0;
  for (TokenId t : big) {
    if (j < small.size() && small[j] == t) ++j;
  }
  return j == small.size();
}

TEST(WordSub, ZeroProbabilityIsIdentity) {
  SplitMix64 rng(1);
  const auto text = random_tokens(rng, 200, 64);
  EXPECT_EQ(word_sub(text, 0.0, 5, blocks(64)), text);
  EXPECT_EQ(word_del(text, 0.0, 5), text);
  EXPECT_EQ(word_sub_context(text, 0.0, hashed_model(64, 1, 1.0, 1), 5, 5, TokenSeq{1}), text);
}

TEST(WordSub, FullProbabilityChangesEveryTokenWithinClass) {
  SplitMix64 rng(2);
  const auto table = blocks(64);
  const auto text = random_tokens(rng, 500, 64);
  const auto out = word_sub(text, 1.0, 6, table);
  ASSERT_EQ(out.size(), text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    ASSERT_NE(out[i], text[i]);
    if (!table.alternatives(text[i]).empty()) {
      ASSERT_EQ(table.class_of(out[i]), table.class_of(text[i]));
    }
  }
  EXPECT_TRUE(word_del(text, 1.0, 6).empty());
}

TEST(WordSub, ReplacementCountWithinBinomialInterval) {
  SplitMix64 rng(3);
  const auto text = random_tokens(rng, 10000, 64);
  const auto out = word_sub(text, 0.2, 7, blocks(64));
  int changed = 0;
  for (std::size_t i = 0; i < text.size(); ++i) changed += out[i] != text[i] ? 1 : 0;
  const double sd = std::sqrt(10000 * 0.2 * 0.8);
  EXPECT_NEAR(changed, 2000, 4 * sd);
}

TEST(WordSub, SingletonUsesAnyOtherToken) {
  const SynonymTable table(std::vector<int>{0, 1, 2, 3});
  TokenSeq text(4000, 2);
  std::vector<int> counts(4, 0);
  for (TokenId t : word_sub(text, 1.0, 8, table)) ++counts[static_cast<std::size_t>(t)];
  EXPECT_EQ(counts[2], 0);
  for (int t : {0, 1, 3}) EXPECT_NEAR(counts[static_cast<std::size_t>(t)], 4000 / 3.0, 150);
}

TEST(WordDel, OutputIsSubsequenceWithBinomialLength) {
  SplitMix64 rng(4);
  const auto text = random_tokens(rng, 10000, 64);
  const auto out = word_del(text, 0.3, 9);
  EXPECT_TRUE(is_subsequence(out, text));
  EXPECT_NEAR(static_cast<double>(out.size()), 7000, 4 * std::sqrt(10000 * 0.3 * 0.7));
}

TEST(WordSubContext, ReplacementsComeFromTopK) {
  const auto model = hashed_model(32, 2, 2.0, 10);
  SplitMix64 rng(5);
  const auto text = random_tokens(rng, 100, 32);
  const TokenSeq lead{3};
  const auto out = word_sub_context(text, 1.0, model, 4, 11, lead);
  TokenSeq context = lead;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto top = top_k_indices(next_logits(model, context), 4);
    ASSERT_NE(out[i], text[i]);
    ASSERT_NE(std::find(top.begin(), top.end(), out[i]), top.end());
    context.push_back(text[i]);
  }
}

TEST(WordSubContext, PeakedModelGivesSecondRanked) {
  // Logits fall with the token id, so token 0 is first and token 1 second.
  const FunctionModel model(16, [](std::span<const TokenId>) {
    LogitsRow row(16);
    for (int t = 0; t < 16; ++t) row[static_cast<std::size_t>(t)] = -3.0 * t;
    return row;
  });
  const TokenSeq text(30, 0);
  EXPECT_EQ(word_sub_context(text, 1.0, model, 2, 12, TokenSeq{5}), TokenSeq(30, 1));
  // Without a lead the first position has no context and is kept.
  const auto no_lead = word_sub_context(text, 1.0, model, 2, 12);
  EXPECT_EQ(no_lead[0], 0);
  EXPECT_EQ(no_lead[1], 1);
}

TEST(Attacks, DeterministicInSeed) {
  SplitMix64 rng(6);
  const auto text = random_tokens(rng, 300, 64);
  const auto table = blocks(64);
  const auto model = hashed_model(64, 1, 1.0, 2);
  for (AttackKind kind : {AttackKind::kWordSub, AttackKind::kWordDel, AttackKind::kWordSubContext}) {
    AttackConfig cfg{kind, 0.3, 42, 5};
    const auto a = apply_attack(text, cfg, table, &model, TokenSeq{1});
    EXPECT_EQ(a, apply_attack(text, cfg, table, &model, TokenSeq{1}));
    cfg.seed = 43;
    EXPECT_NE(a, apply_attack(text, cfg, table, &model, TokenSeq{1}));
  }
}

TEST(Attacks, ValidationAndNames) {
  const auto table = blocks(8);
  EXPECT_THROW(word_sub(TokenSeq{1}, 1.5, 1, table), ConfigError);
  EXPECT_THROW(word_del(TokenSeq{1}, -0.1, 1), ConfigError);
  EXPECT_THROW(word_sub_context(TokenSeq{1}, 0.5, hashed_model(8, 1, 1, 1), 1, 1), ConfigError);
  EXPECT_THROW(apply_attack(TokenSeq{1}, {AttackKind::kWordSubContext, 0.5, 1, 3}, table, nullptr), ConfigError);
  EXPECT_THROW(SynonymTable(std::vector<int>{0}), ConfigError);
  for (AttackKind k : {AttackKind::kWordSub, AttackKind::kWordDel, AttackKind::kWordSubContext}) {
    EXPECT_EQ(attack_kind_from_string(to_string(k)), k);
  }
  EXPECT_THROW(attack_kind_from_string("paraphrase"), ConfigError);
  nlohmann::json j = table;
  EXPECT_EQ(synonym_table_from_json(j).classes(), table.classes());
  EXPECT_THROW(synonym_table_from_json(nlohmann::json{{"x", 1}}), DataError);
}

}  // namespace
}  // namespace capwm
