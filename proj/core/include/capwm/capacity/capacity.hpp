#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "capwm/common.hpp"

namespace capwm {

// Lower/upper clamp for the heuristic capacity scores, keeping them inside (0, 1).
inline constexpr double kCapacityEpsilon = 1e-9;

// Context window layout: `left` positions before the scored one and `right`
// after it, each summarised by its `top_m` largest probabilities.
struct WindowShape {
  int top_m = 64;
  int left = 1;
  int right = 1;

  int positions() const { return left + right + 1; }
  int feature_length() const { return top_m * positions(); }
  bool operator==(const WindowShape&) const = default;
};

// M = min(100, V).
int default_top_m(int vocab_size);

struct StateWindow {
  WindowShape shape;
  std::vector<double> features;
};

// `dists` holds one entry per window position, oldest first; a null entry is
// a position outside the sequence and becomes an all-zero segment. Each
// segment is the top-M probabilities sorted descending, zero-padded.
StateWindow build_state_window(std::span<const ProbDist* const> dists, const WindowShape& shape);

// Normalized Shannon entropy, clamped to (eps, 1 - eps).
double entropy_capacity(std::span<const double> dist);

// exp(-(l1 - l2)) for the two largest logits, clamped to (eps, 1 - eps).
double logit_delta_capacity(std::span<const double> logits);

struct BinaryMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Positive class is label 0 (quality-critical); a score below `threshold`
// predicts positive. Zero denominators give 0.
BinaryMetrics evaluator_metrics(std::span<const double> predictions, std::span<const int> labels, double threshold);

struct ThresholdChoice {
  double threshold = 0.5;
  BinaryMetrics metrics;
};

// Best F1 over 101 thresholds evenly spaced from the smallest prediction to
// just above the largest one. Ties go to the lowest threshold.
ThresholdChoice best_threshold_f1(std::span<const double> predictions, std::span<const int> labels);

}  // namespace capwm
