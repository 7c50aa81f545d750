#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "capwm/adaptive/adaptive.hpp"
#include "capwm/detect/detect.hpp"
#include "support.hpp"

namespace capwm {
namespace {

using testing::hashed_model;
using testing::random_tokens;

// Builds a text whose green/red pattern is exactly `pattern` under (key, gamma, h=1).
TokenSeq text_with_pattern(const WatermarkKey& key, const std::vector<bool>& pattern, int vocab) {
  TokenSeq text{0};
  for (bool want_green : pattern) {
    const auto part = partition_vocab(context_seed(key, text, 1), 0.25, vocab);
    TokenId t = 0;
    while (part.is_green(t) != want_green) ++t;
    text.push_back(t);
  }
  return text;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

TEST(GreenDetector, HandComputedZ) {
  const auto key = WatermarkKey::from_seed(1);
  std::vector<bool> pattern(16, false);
  std::fill(pattern.begin(), pattern.begin() + 10, true);
  const auto s = detect_green(text_with_pattern(key, pattern, 64), key, 0.25, 1, 64);
  EXPECT_EQ(s.T, 16u);
  EXPECT_EQ(s.raw, 10.0);
  EXPECT_NEAR(s.z, 3.4641, 1e-4);  // 6 / sqrt(3)

  std::vector<bool> low(15, false);
  std::fill(low.begin(), low.begin() + 3, true);
  const auto s2 = detect_green(text_with_pattern(key, low, 64), key, 0.25, 1, 64);
  EXPECT_NEAR(s2.z, (3 - 3.75) / std::sqrt(15 * 0.1875), 1e-12);
  EXPECT_NEAR(s2.z, -0.4472, 1e-4);

  std::vector<bool> even(20, false);
  std::fill(even.begin(), even.begin() + 5, true);
  EXPECT_EQ(detect_green(text_with_pattern(key, even, 64), key, 0.25, 1, 64).z, 0.0);
}

TEST(GreenDetector, MatchesIndependentCount) {
  SplitMix64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto key = WatermarkKey::from_seed(rng.next());
    const int h = static_cast<int>(rng.below(4));
    const auto text = random_tokens(rng, 10 + rng.below(60), 64);
    int green = 0, T = 0;
    for (std::size_t i = static_cast<std::size_t>(h); i < text.size(); ++i) {
      const auto part = partition_vocab(
          context_seed(key, std::span<const TokenId>(text.data(), i), h), 0.25, 64);
      green += part.is_green(text[i]) ? 1 : 0;
      ++T;
    }
    const auto s = detect_green(text, key, 0.25, h, 64);
    ASSERT_EQ(s.T, static_cast<std::size_t>(T));
    ASSERT_EQ(s.raw, green);
    ASSERT_NEAR(s.z, (green - 0.25 * T) / std::sqrt(T * 0.25 * 0.75), 1e-12);
  }
}

TEST(GreenDetector, TextWithoutScoredPositionIsDataError) {
  const auto key = WatermarkKey::from_seed(3);
  EXPECT_THROW(detect_green(TokenSeq{5}, key, 0.25, 1, 64), DataError);
  EXPECT_THROW(detect_exp(TokenSeq{5, 6}, key, 2), DataError);
  EXPECT_EQ(detect_green(TokenSeq{5, 6}, key, 0.25, 1, 64).T, 1u);
}

TEST(GreenDetector, UnigramIsAdditiveOverConcatenation) {
  SplitMix64 rng(4);
  const auto key = WatermarkKey::from_seed(4);
  const auto a = random_tokens(rng, 40, 64), b = random_tokens(rng, 25, 64);
  TokenSeq ab = a;
  ab.insert(ab.end(), b.begin(), b.end());
  const auto sa = detect_green(a, key, 0.25, 0, 64), sb = detect_green(b, key, 0.25, 0, 64);
  const auto sab = detect_green(ab, key, 0.25, 0, 64);
  EXPECT_EQ(sab.raw, sa.raw + sb.raw);
  EXPECT_EQ(sab.T, sa.T + sb.T);
  // Per-token membership is position independent.
  const auto part = partition_vocab(context_seed(key, TokenSeq{}, 0), 0.25, 64);
  double g = 0;
  for (TokenId t : ab) g += part.is_green(t) ? 1 : 0;
  EXPECT_EQ(sab.raw, g);
}

TEST(ExpDetector, MatchesIndependentSum) {
  SplitMix64 rng(5);
  const auto key = WatermarkKey::from_seed(5);
  const auto text = random_tokens(rng, 50, 64);
  double S = 0;
  for (std::size_t i = 1; i < text.size(); ++i) {
    S += -std::log(1 - exp_hash_value(context_seed(key, std::span<const TokenId>(text.data(), i), 1), text[i]));
  }
  const auto s = detect_exp(text, key, 1);
  EXPECT_EQ(s.T, 49u);
  EXPECT_NEAR(s.raw, S, 1e-9);
  EXPECT_NEAR(s.z, (S - 49) / 7.0, 1e-9);
}

TEST(ExpDetector, RandomTextScoreNearOnePerToken) {
  SplitMix64 rng(6);
  const auto key = WatermarkKey::from_seed(6);
  const auto s = detect_exp(random_tokens(rng, 20001, 64), key, 1);
  EXPECT_GE(s.raw / s.T, 0.95);
  EXPECT_LE(s.raw / s.T, 1.05);
}

TEST(ExpDetector, FullPoolWatermarkIsDetected) {
  const auto model = hashed_model(64, 3, 1.0, 7);
  const auto key = WatermarkKey::from_seed(7);
  SplitMix64 rng(7);
  std::vector<double> zs;
  for (int i = 0; i < 20; ++i) {
    const auto prompt = random_tokens(rng, 4, 64);
    const auto out = generate_wm_plain(model, prompt, key, SchemeConfig::exp(64), {100, std::nullopt, std::nullopt});
    zs.push_back(detect_exp(out.tokens, key, 1).z);
  }
  EXPECT_GT(median(zs), 4.0);
}

TEST(Calibration, UnwatermarkedSampledTextIsNull) {
  const auto model = hashed_model(64, 3, 1.0, 8);
  const auto key = WatermarkKey::from_seed(8);
  SplitMix64 rng(8);
  std::vector<double> green, ex;
  for (int i = 0; i < 200; ++i) {
    const auto prompt = random_tokens(rng, 4, 64);
    const auto text = generate_greedy(model, prompt, {100, std::nullopt, rng.next()}).tokens;
    green.push_back(detect_green(text, key, 0.25, 1, 64).z);
    ex.push_back(detect_exp(text, key, 1).z);
  }
  for (const auto* zs : {&green, &ex}) {
    double mean = 0, sq = 0;
    for (double z : *zs) mean += z;
    mean /= zs->size();
    for (double z : *zs) sq += (z - mean) * (z - mean);
    const double sd = std::sqrt(sq / (zs->size() - 1));
    EXPECT_LT(std::abs(mean), 0.25);
    EXPECT_GT(sd, 0.75);
    EXPECT_LT(sd, 1.25);
    EXPECT_LE(std::count_if(zs->begin(), zs->end(), [](double z) { return z > kDefaultZThreshold; }), 1);
  }
}

TEST(Power, GreenFractionGrowsWithDelta) {
  const auto model = hashed_model(64, 3, 1.0, 9);
  const auto key = WatermarkKey::from_seed(9);
  double prev = -INFINITY;
  for (double delta : {0.0, 1.0, 2.0, 4.0}) {
    SplitMix64 rng(9);
    double total = 0;
    for (int i = 0; i < 30; ++i) {
      const auto prompt = random_tokens(rng, 4, 64);
      const auto out =
          generate_wm_plain(model, prompt, key, SchemeConfig::kgw(delta), {80, std::nullopt, rng.next()});
      total += detect_green(out.tokens, key, 0.25, 1, 64).z;
    }
    EXPECT_GT(total / 30, prev) << "delta " << delta;
    prev = total / 30;
  }
}

TEST(Detect, DispatchAndJson) {
  SplitMix64 rng(10);
  const auto key = WatermarkKey::from_seed(10);
  const auto text = random_tokens(rng, 30, 64);
  EXPECT_EQ(detect_score(text, key, SchemeConfig::kgw(2.0, 0.25, 2), 64).z, detect_green(text, key, 0.25, 2, 64).z);
  EXPECT_EQ(detect_score(text, key, SchemeConfig::unigram(2.0), 64).z, detect_green(text, key, 0.25, 0, 64).z);
  EXPECT_EQ(detect_score(text, key, SchemeConfig::exp(8), 64).z, detect_exp(text, key, 1).z);
  const auto o = detect(text, key, SchemeConfig::kgw(2.0), 64, -100.0);
  EXPECT_TRUE(o.watermarked);
  nlohmann::json j = o;
  for (const char* field : {"scheme", "T", "raw", "z", "threshold", "watermarked"}) EXPECT_TRUE(j.contains(field));
  EXPECT_EQ(j["scheme"], "kgw");
  EXPECT_EQ(j["T"], 29);
}

TEST(Metrics, RocAucExamples) {
  EXPECT_EQ(roc_auc({{3, 4}, {1, 2}}), 1.0);
  EXPECT_EQ(roc_auc({{1, 1}, {1, 1}}), 0.5);
  EXPECT_EQ(roc_auc({{1, 3}, {2, 0}}), 0.75);
  EXPECT_EQ(roc_auc({{1, 2}, {3, 4}}), 0.0);
}

TEST(Metrics, RocAucMatchesPairCountOnRandomScores) {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    ScorePair s;
    for (int i = 0; i < 40; ++i) s.positives.push_back(std::round(4 * rng.normal()) + 1);
    for (int i = 0; i < 30; ++i) s.negatives.push_back(std::round(4 * rng.normal()));
    double wins = 0;
    for (double p : s.positives) {
      for (double n : s.negatives) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
    }
    EXPECT_NEAR(roc_auc(s), wins / (40.0 * 30.0), 1e-12);
  }
}

TEST(Metrics, BestF1Examples) {
  const auto sep = best_f1({{5, 6}, {1, 2}});
  EXPECT_EQ(sep.f1, 1.0);
  EXPECT_EQ(f1_at({{5, 6}, {1, 2}}, sep.threshold), 1.0);
  EXPECT_NEAR(best_f1({{1}, {2}}).f1, 2.0 / 3.0, 1e-12);
  SplitMix64 rng(12);
  ScorePair s;
  for (int i = 0; i < 50; ++i) {
    s.positives.push_back(rng.normal() + 1);
    s.negatives.push_back(rng.normal());
  }
  const auto best = best_f1(s);
  EXPECT_EQ(f1_at(s, best.threshold), best.f1);
  for (int i = -30; i <= 30; ++i) EXPECT_LE(f1_at(s, i / 10.0), best.f1 + 1e-12);
}

}  // namespace
}  // namespace capwm
