#include "capwm/detect/detect.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

namespace capwm {

namespace {

std::size_t scored_count(std::span<const TokenId> text, int h) {
  if (h < 0) throw ConfigError("hash window must be >= 0");
  if (text.size() < static_cast<std::size_t>(h) + 1) {
    throw DataError("text too short: need at least " + std::to_string(h + 1) + " tokens, got " +
                    std::to_string(text.size()));
  }
  return text.size() - static_cast<std::size_t>(h);
}

void check_pair(const ScorePair& scores) {
  if (scores.positives.empty() || scores.negatives.empty()) throw UsageError("score lists must be non-empty");
}

}  // namespace

DetectionScore detect_green(std::span<const TokenId> text, const WatermarkKey& key, double gamma, int h,
                            int vocab_size) {
  const std::size_t T = scored_count(text, h);
  std::size_t g = 0;
  for (std::size_t i = static_cast<std::size_t>(h); i < text.size(); ++i) {
    const TokenId t = text[i];
    if (t < 0 || t >= vocab_size) throw DataError("token " + std::to_string(t) + " outside the vocabulary");
    const auto partition = partition_vocab(context_seed(key, text.first(i), h), gamma, vocab_size);
    if (partition.is_green(t)) ++g;
  }
  const double n = static_cast<double>(T);
  return {(static_cast<double>(g) - gamma * n) / std::sqrt(n * gamma * (1.0 - gamma)), static_cast<double>(g), T};
}

DetectionScore detect_exp(std::span<const TokenId> text, const WatermarkKey& key, int h) {
  const std::size_t T = scored_count(text, h);
  double s = 0.0;
  for (std::size_t i = static_cast<std::size_t>(h); i < text.size(); ++i) {
    s += -std::log1p(-exp_hash_value(context_seed(key, text.first(i), h), text[i]));
  }
  const double n = static_cast<double>(T);
  return {(s - n) / std::sqrt(n), s, T};
}

DetectionScore detect_score(std::span<const TokenId> text, const WatermarkKey& key, const SchemeConfig& scheme,
                            int vocab_size) {
  if (scheme.kind == SchemeKind::kExp) return detect_exp(text, key, scheme.hash_window);
  return detect_green(text, key, scheme.gamma, scheme.hash_window, vocab_size);
}

DetectionOutcome detect(std::span<const TokenId> text, const WatermarkKey& key, const SchemeConfig& scheme,
                        int vocab_size, double threshold) {
  DetectionOutcome out;
  out.scheme = scheme.kind;
  out.score = detect_score(text, key, scheme, vocab_size);
  out.threshold = threshold;
  out.watermarked = out.score.z > threshold;
  return out;
}

void to_json(nlohmann::json& j, const DetectionOutcome& o) {
  j = {{"scheme", to_string(o.scheme)}, {"T", o.score.T},           {"raw", o.score.raw},
       {"z", o.score.z},                {"threshold", o.threshold}, {"watermarked", o.watermarked}};
}

double roc_auc(const ScorePair& scores) {
  check_pair(scores);
  std::vector<double> neg = scores.negatives;
  std::sort(neg.begin(), neg.end());
  double wins = 0.0;
  for (double p : scores.positives) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
    const auto hi = std::upper_bound(lo, neg.end(), p);
    wins += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(scores.positives.size()) * static_cast<double>(neg.size()));
}

double f1_at(const ScorePair& scores, double threshold) {
  double tp = 0, fp = 0;
  for (double p : scores.positives) tp += p > threshold ? 1 : 0;
  for (double n : scores.negatives) fp += n > threshold ? 1 : 0;
  const double fn = static_cast<double>(scores.positives.size()) - tp;
  const double denom = 2 * tp + fp + fn;
  return denom > 0 ? 2 * tp / denom : 0.0;
}

F1Choice best_f1(const ScorePair& scores) {
  check_pair(scores);
  std::vector<double> all = scores.positives;
  all.insert(all.end(), scores.negatives.begin(), scores.negatives.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());

  std::vector<double> candidates;
  candidates.push_back(all.front() - 1.0);
  for (std::size_t i = 0; i + 1 < all.size(); ++i) candidates.push_back(0.5 * (all[i] + all[i + 1]));

  F1Choice best{-1.0, 0.0};
  for (double t : candidates) {
    const double f = f1_at(scores, t);
    if (f > best.f1) best = {f, t};
  }
  return best;
}

}  // namespace capwm
