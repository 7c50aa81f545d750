#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "capwm/adaptive/adaptive.hpp"
#include "capwm/attacks/attacks.hpp"
#include "capwm/capacity/evaluator.hpp"
#include "capwm/harness/report.hpp"
#include "capwm/harness/task.hpp"
#include "capwm/toylm/language_model.hpp"
#include "capwm/wmcore/watermark.hpp"

namespace capwm {

enum class Method { kPlain, kEntropy, kCaw };
enum class Tier { kSoft, kMid, kHard };

std::string_view to_string(Method method);
Method method_from_string(std::string_view name);
std::string_view to_string(Tier tier);
Tier tier_from_string(std::string_view name);

// Strength per tier: delta for reweighting schemes, top-K for EXP.
struct TierTable {
  std::array<double, 3> delta{1.0, 2.0, 4.0};
  std::array<int, 3> top_k{2, 4, 8};
};

SchemeConfig tiered_scheme(const SchemeConfig& base, Tier tier, const TierTable& table);

// How the evaluator output is fed to the strength map. The map leaves scores
// at or above theta unwatermarked; the evaluator estimates the probability
// that a position tolerates a watermark. kCriticality feeds 1 - c so the
// tolerant positions carry the watermark; kTolerance feeds c unchanged.
enum class CapacityOrientation { kCriticality, kTolerance };

std::string_view to_string(CapacityOrientation o);
CapacityOrientation orientation_from_string(std::string_view name);

class OrientedCapacity final : public CapacitySource {
 public:
  OrientedCapacity(EvaluatorParams params, CapacityOrientation orientation)
      : params_(std::move(params)), orientation_(orientation) {}
  const WindowShape& shape() const override { return params_.shape; }
  double score(const StateWindow& window) const override;

 private:
  EvaluatorParams params_;
  CapacityOrientation orientation_;
};

struct ExperimentConfig {
  std::string backend = "ngram";
  std::filesystem::path model_path;  // empty: train the task model
  TaskSpec task;
  int train_documents = 20000;
  int ngram_order = 8;
  double ngram_alpha = 0.01;

  std::vector<SchemeConfig> schemes{SchemeConfig::kgw(4.0)};
  std::vector<Method> methods{Method::kPlain, Method::kEntropy, Method::kCaw};
  std::vector<Tier> tiers{Tier::kHard};
  TierTable tier_table;

  std::vector<double> thetas{0.5};
  double beta = 1.0;
  std::vector<double> entropy_thresholds{0.31};
  std::filesystem::path evaluator_path;  // empty: train from substitution labels
  CapacityOrientation orientation = CapacityOrientation::kCriticality;
  int label_prompts = 300;
  TrainConfig train;

  int n = 200;
  int repetitions = 5;
  int max_new_tokens = 200;
  std::vector<AttackConfig> attacks;
  std::optional<std::string> key_hex;
  std::uint64_t seed = 1;

  void validate() const;
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
void to_json(nlohmann::json& j, const ExperimentConfig& config);

// Model, task and evaluator shared by every condition of a run.
struct ExperimentContext {
  SyntheticTask task;
  std::shared_ptr<const LanguageModel> model;
  EvaluatorParams evaluator;
  std::size_t label_count = 0;
  std::size_t label_skipped = 0;
};

std::shared_ptr<const LanguageModel> load_model(const std::string& backend, const std::filesystem::path& path);
// Loads config.model_path, or trains the task n-gram / initialises a random
// transformer from config.seed.
std::shared_ptr<const LanguageModel> build_model(const ExperimentConfig& config);
ExperimentContext prepare_context(const ExperimentConfig& config);

struct Condition {
  Method method = Method::kPlain;
  SchemeConfig scheme;  // with tier strength applied
  Tier tier = Tier::kHard;
  // theta for the adaptive method, entropy threshold for the gated one.
  double parameter = 0.0;
};

struct ConditionSummary {
  Condition condition;
  std::vector<double> accuracy;  // per repetition
  std::vector<double> auroc;
  std::vector<double> f1;
  std::vector<double> mean_z;
  std::vector<double> mean_z_clean;
  std::vector<double> watermarked_fraction;
  double compute_ratio = 0.0;
  std::size_t peak_scratch_bytes = 0;
};

// Per repetition inputs shared by conditions.
struct RepetitionData {
  std::uint64_t seed = 0;
  WatermarkKey key;
  std::vector<TaskItem> items;
  std::vector<TokenSeq> clean;  // greedy completions
  std::size_t clean_rows = 0;
};

RepetitionData make_repetition(const ExperimentContext& ctx, const ExperimentConfig& config, int repetition);

GenerationOutput generate_condition(const ExperimentContext& ctx, const ExperimentConfig& config,
                                   const Condition& condition, std::span<const TokenId> prompt,
                                   const WatermarkKey& key);

// z of a completion; texts too short to score count as 0 (no evidence).
double completion_z(std::span<const TokenId> text, const WatermarkKey& key, const SchemeConfig& scheme,
                    int vocab_size);

std::vector<Condition> expand_conditions(const ExperimentConfig& config);
std::vector<ConditionSummary> evaluate_conditions(const ExperimentContext& ctx, const ExperimentConfig& config,
                                                  std::span<const Condition> conditions);

double mean_of(std::span<const double> v);
double spread_of(std::span<const double> v);  // sample standard deviation, 0 for one value

Report run_experiment(const ExperimentConfig& config);
Report run_experiment(const ExperimentContext& ctx, const ExperimentConfig& config);

// One point per (scheme, method, tier, parameter); non-plain rows record
// whether some plain point of the same scheme dominates them.
Report sweep_pareto(const ExperimentContext& ctx, const ExperimentConfig& config, std::span<const Tier> tiers);

// Detection-rate loss AUROC(clean) - AUROC(attacked) per (scheme, method in
// {plain, caw}, attack), over config.repetitions repetitions at the last
// configured tier.
Report robustness_suite(const ExperimentContext& ctx, const ExperimentConfig& config,
                        std::span<const AttackConfig> attacks);

// exp of the mean negative log-likelihood of text[1:] (or of all of `text`
// when `context` is non-empty) under the model.
double perplexity(const LanguageModel& model, std::span<const TokenId> text, std::span<const TokenId> context = {});

// Two-sided Mann-Whitney U test p-value (normal approximation, tie corrected).
double rank_test_p(std::span<const double> a, std::span<const double> b);

// Perplexity and accuracy of unwatermarked, plain and adaptive completions,
// with rank-test p-values against the unwatermarked condition.
Report perplexity_analysis(const ExperimentContext& ctx, const ExperimentConfig& config);

}  // namespace capwm
