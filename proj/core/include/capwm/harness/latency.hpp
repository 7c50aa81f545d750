#pragma once

#include <cstdint>

#include "capwm/adaptive/adaptive.hpp"
#include "capwm/harness/report.hpp"
#include "capwm/toylm/transformer.hpp"

namespace capwm {

// Standard toy config for timing: wide enough that decoding is bound by
// weight traffic, as on real accelerators, rather than by arithmetic.
TransformerConfig latency_model_config();

struct LatencyConfig {
  TransformerConfig model = latency_model_config();
  int prompt_length = 128;
  int new_tokens = 64;
  int runs = 10;
  int warmup = 1;
  SchemeConfig scheme = SchemeConfig::kgw(4.0);
  double theta = 0.5;
  double beta = 1.0;
  std::uint64_t seed = 1;

  void validate() const;
};

// Mean wall time per generation for: unwatermarked greedy, plain watermark,
// and the adaptive loop with tree, sequential and batched branching. Modes
// are timed round-robin so drift affects them alike. Ratios are relative to
// the unwatermarked mode; memory ratios relative to the tree mode.
Report bench_latency(const LatencyConfig& config);
Report bench_latency(const LatencyConfig& config, const LanguageModel& model, const CapacitySource& capacity);

}  // namespace capwm
