#include "capwm/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace capwm {

ProbDist softmax(std::span<const double> logits) {
  if (logits.empty()) throw UsageError("softmax of an empty row");
  const double mx = *std::max_element(logits.begin(), logits.end());
  ProbDist out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& p : out) p /= sum;
  return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  if (logits.empty()) throw UsageError("log_softmax of an empty row");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

TokenId argmax(std::span<const double> values) {
  if (values.empty()) throw UsageError("argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

double entropy(std::span<const double> dist) {
  double h = 0.0;
  for (double p : dist) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double normalized_entropy(std::span<const double> dist) {
  if (dist.size() < 2) return 0.0;
  return entropy(dist) / std::log(static_cast<double>(dist.size()));
}

std::vector<TokenId> top_k_indices(std::span<const double> values, std::size_t k) {
  k = std::min(k, values.size());
  std::vector<TokenId> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto cmp = [&](TokenId a, TokenId b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), cmp);
  idx.resize(k);
  return idx;
}

bool is_valid_distribution(std::span<const double> dist, double tol) {
  double sum = 0.0;
  for (double p : dist) {
    if (!(p >= 0.0) || !std::isfinite(p)) return false;
    sum += p;
  }
  return std::abs(sum - 1.0) <= tol;
}

}  // namespace capwm
