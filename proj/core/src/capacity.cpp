#include "capwm/capacity/capacity.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace capwm {

int default_top_m(int vocab_size) { return std::min(100, vocab_size); }

StateWindow build_state_window(std::span<const ProbDist* const> dists, const WindowShape& shape) {
  if (shape.top_m < 1 || shape.left < 0 || shape.right < 0) throw UsageError("invalid window shape");
  if (dists.size() != static_cast<std::size_t>(shape.positions())) {
    throw UsageError("build_state_window: expected " + std::to_string(shape.positions()) + " distributions, got " +
                     std::to_string(dists.size()));
  }
  StateWindow window{shape, std::vector<double>(static_cast<std::size_t>(shape.feature_length()), 0.0)};
  const auto m = static_cast<std::size_t>(shape.top_m);
  for (std::size_t pos = 0; pos < dists.size(); ++pos) {
    if (dists[pos] == nullptr) continue;
    std::vector<double> sorted(*dists[pos]);
    const std::size_t keep = std::min(m, sorted.size());
    std::partial_sort(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(keep), sorted.end(),
                      std::greater<>());
    std::copy_n(sorted.begin(), keep, window.features.begin() + static_cast<std::ptrdiff_t>(pos * m));
  }
  return window;
}

namespace {
double clamp_open(double c) { return std::clamp(c, kCapacityEpsilon, 1.0 - kCapacityEpsilon); }
}  // namespace

double entropy_capacity(std::span<const double> dist) { return clamp_open(normalized_entropy(dist)); }

double logit_delta_capacity(std::span<const double> logits) {
  if (logits.size() < 2) throw UsageError("logit_delta_capacity needs V >= 2");
  const auto top = top_k_indices(logits, 2);
  const double gap = logits[static_cast<std::size_t>(top[0])] - logits[static_cast<std::size_t>(top[1])];
  return clamp_open(std::exp(-gap));
}

BinaryMetrics evaluator_metrics(std::span<const double> predictions, std::span<const int> labels, double threshold) {
  if (predictions.size() != labels.size()) throw UsageError("evaluator_metrics: length mismatch");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool predicted = predictions[i] < threshold;
    const bool actual = labels[i] == 0;
    if (predicted && actual) ++tp;
    if (predicted && !actual) ++fp;
    if (!predicted && actual) ++fn;
  }
  BinaryMetrics m;
  if (tp + fp > 0) m.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (m.precision + m.recall > 0) m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

ThresholdChoice best_threshold_f1(std::span<const double> predictions, std::span<const int> labels) {
  if (predictions.empty()) throw UsageError("best_threshold_f1: no predictions");
  const auto [lo_it, hi_it] = std::minmax_element(predictions.begin(), predictions.end());
  const double lo = *lo_it;
  const double hi = std::nextafter(*hi_it, 2.0);
  ThresholdChoice best;
  best.metrics.f1 = -1.0;
  for (int k = 0; k <= 100; ++k) {
    const double t = lo + (hi - lo) * k / 100.0;
    const BinaryMetrics m = evaluator_metrics(predictions, labels, t);
    if (m.f1 > best.metrics.f1) best = {t, m};
  }
  return best;
}

}  // namespace capwm
