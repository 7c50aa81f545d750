#pragma once

#include <nlohmann/json_fwd.hpp>
#include <span>
#include <string>
#include <vector>

#include "capwm/common.hpp"
#include "capwm/wmcore/watermark.hpp"

namespace capwm {

struct DetectionScore {
  double z = 0.0;
  // Green count, or the exponential sum for EXP.
  double raw = 0.0;
  std::size_t T = 0;
};

inline constexpr double kDefaultZThreshold = 4.0;

struct DetectionOutcome {
  SchemeKind scheme = SchemeKind::kKgw;
  DetectionScore score;
  double threshold = kDefaultZThreshold;
  bool watermarked = false;
};

// Positions without a full h-token context inside `text` are skipped.
// z = (g - gamma T) / sqrt(T gamma (1 - gamma)).
DetectionScore detect_green(std::span<const TokenId> text, const WatermarkKey& key, double gamma, int h,
                            int vocab_size);

// S = sum -ln(1 - F(t_i)); z = (S - T) / sqrt(T).
DetectionScore detect_exp(std::span<const TokenId> text, const WatermarkKey& key, int h);

DetectionScore detect_score(std::span<const TokenId> text, const WatermarkKey& key, const SchemeConfig& scheme,
                            int vocab_size);

DetectionOutcome detect(std::span<const TokenId> text, const WatermarkKey& key, const SchemeConfig& scheme,
                        int vocab_size, double threshold = kDefaultZThreshold);

void to_json(nlohmann::json& j, const DetectionOutcome& outcome);

struct ScorePair {
  std::vector<double> positives;
  std::vector<double> negatives;
};

// Fraction of positive/negative pairs ranked correctly, ties counted as half.
double roc_auc(const ScorePair& scores);

struct F1Choice {
  double f1 = 0.0;
  double threshold = 0.0;
};

// Scores strictly above the threshold are classified watermarked. Candidates
// are midpoints between adjacent distinct sorted scores plus one below the
// minimum; ties go to the lowest threshold.
F1Choice best_f1(const ScorePair& scores);

double f1_at(const ScorePair& scores, double threshold);

}  // namespace capwm
