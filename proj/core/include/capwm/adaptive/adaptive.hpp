#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "capwm/capacity/capacity.hpp"
#include "capwm/capacity/evaluator.hpp"
#include "capwm/toylm/language_model.hpp"
#include "capwm/wmcore/watermark.hpp"

namespace capwm {

// Discrete watermark outcomes at one position.
enum class Outcome {
  kNone,        // unwatermarked greedy
  kTopK,        // EXP with an effective pool of top_k tokens
  kGlobalBest,  // reweighting left the global argmax in place
  kGreenBest,   // reweighting flipped to the best green token
};

std::string_view to_string(Outcome outcome);

struct Strategy {
  Outcome outcome = Outcome::kNone;
  int top_k = 0;
  TokenId candidate = 0;
};

struct StrategySet {
  std::vector<Strategy> strategies;
  // Deduplicated candidates; the first is the unwatermarked greedy token.
  std::vector<TokenId> unique_candidates;
};

// EXP: one strategy per K' in 1..round(beta K). Reweighting schemes: the
// global argmax and the best green token. `partition` is required for the
// reweighting schemes and ignored for EXP.
StrategySet enumerate_strategies(std::span<const double> dist, std::span<const double> logits,
                                 const SchemeConfig& scheme, ContextSeed seed, double beta,
                                 const GreenPartition* partition = nullptr);

struct CAWConfig {
  double theta = 0.5;
  double beta = 1.0;
  SchemeConfig scheme;
  int max_new_tokens = 200;
  std::optional<TokenId> stop_token;

  void validate(int vocab_size) const;
};

// Reduced strength for a capacity score, or nullopt when c >= theta.
struct Strength {
  int top_k = 0;       // EXP
  double delta = 0.0;  // KGW / Unigram
};

int max_top_k(const CAWConfig& config);
std::optional<Strength> map_capacity_to_strength(double capacity, const CAWConfig& config);

// Capacity score source used by the decode loop.
class CapacitySource {
 public:
  virtual ~CapacitySource() = default;
  virtual const WindowShape& shape() const = 0;
  virtual double score(const StateWindow& window) const = 0;
};

class EvaluatorCapacity final : public CapacitySource {
 public:
  explicit EvaluatorCapacity(EvaluatorParams params) : params_(std::move(params)) {}
  const WindowShape& shape() const override { return params_.shape; }
  double score(const StateWindow& window) const override { return evaluate_capacity(params_, window); }

 private:
  EvaluatorParams params_;
};

class FunctionCapacity final : public CapacitySource {
 public:
  FunctionCapacity(WindowShape shape, std::function<double(const StateWindow&)> fn)
      : shape_(shape), fn_(std::move(fn)) {}
  const WindowShape& shape() const override { return shape_; }
  double score(const StateWindow& window) const override { return fn_(window); }

 private:
  WindowShape shape_;
  std::function<double(const StateWindow&)> fn_;
};

FunctionCapacity constant_capacity(double value, WindowShape shape = {});

struct TraceRecord {
  std::size_t position = 0;
  std::uint64_t dist_hash = 0;
  // Capacity score for the adaptive loop, normalized entropy for the gated baseline.
  double score = 0.0;
  Outcome outcome = Outcome::kNone;
  int top_k = 0;
  double delta = 0.0;
  TokenId greedy = 0;
  TokenId chosen = 0;
  std::vector<TokenId> candidates;

  bool watermarked() const { return outcome != Outcome::kNone; }
};

struct GenerationOutput {
  TokenSeq tokens;
  std::vector<TraceRecord> trace;
  DecodeCounters counters;
};

std::uint64_t hash_distribution(std::span<const double> dist);

// Adaptive decode loop. Each step pre-generates the next-position logits for
// every unique candidate in one branch pass, scores capacity on the window
// [p(t_{i-1}), p(t_i), p(t_{i+1} | greedy)], and commits the selected
// candidate's pre-generated state.
GenerationOutput generate_wm(const LanguageModel& model, std::span<const TokenId> prompt, const WatermarkKey& key,
                             const CAWConfig& config, const CapacitySource& capacity,
                             BranchMode mode = BranchMode::kTree);

// Same decisions computed with uncached forward passes and no branch reuse.
TokenSeq generate_wm_reference(const LanguageModel& model, std::span<const TokenId> prompt, const WatermarkKey& key,
                               const CAWConfig& config, const CapacitySource& capacity);

struct GenerationLimits {
  int max_new_tokens = 200;
  std::optional<TokenId> stop_token;
  // Multinomial sampling from the (reweighted) distribution instead of greedy
  // decoding. EXP selection is unaffected. Used for detector calibration,
  // where greedy toy-model text is too repetitive to be a fair null sample.
  std::optional<std::uint64_t> sampling_seed;
};

GenerationOutput generate_greedy(const LanguageModel& model, std::span<const TokenId> prompt,
                                 const GenerationLimits& limits);

// Full base strength at every position.
GenerationOutput generate_wm_plain(const LanguageModel& model, std::span<const TokenId> prompt,
                                   const WatermarkKey& key, const SchemeConfig& scheme,
                                   const GenerationLimits& limits);

// Full base strength iff the normalized entropy of p(t_i) is at least `entropy_threshold`.
GenerationOutput generate_wm_entropy_gated(const LanguageModel& model, std::span<const TokenId> prompt,
                                           const WatermarkKey& key, const SchemeConfig& scheme,
                                           double entropy_threshold, const GenerationLimits& limits);

void save_trace(std::span<const TraceRecord> trace, const std::filesystem::path& path);
std::vector<TraceRecord> load_trace(const std::filesystem::path& path);

}  // namespace capwm
