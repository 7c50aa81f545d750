#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "capwm/capacity/capacity.hpp"
#include "capwm/capacity/evaluator.hpp"
#include "capwm/toylm/language_model.hpp"

namespace capwm {

// Maps a completion to its discrete answer, or nullopt when none can be extracted.
using AnswerOracle = std::function<std::optional<int>(std::span<const TokenId> completion)>;

struct LabelingInput {
  TokenSeq prompt;
  TokenSeq completion;
};

struct LabelingOptions {
  WindowShape shape;
  std::optional<TokenId> stop_token;
  // Regenerated continuations may run this many tokens past the original length.
  int extra_tokens = 8;
};

struct LabelingResult {
  std::vector<LabeledSample> samples;
  // Per sample: index into the input corpus and position in its completion.
  std::vector<std::pair<std::size_t, std::size_t>> origin;
  std::size_t skipped = 0;
};

// Position i of a completion is labeled 0 (critical) iff replacing its token
// with the model's highest-ranked alternative and greedily regenerating the
// rest changes the oracle's answer. Features are the model's distributions
// around i along the original completion. Completions whose own answer cannot
// be extracted are skipped and counted.
LabelingResult gen_labels(std::span<const LabelingInput> corpus, const LanguageModel& model,
                          const AnswerOracle& oracle, const LabelingOptions& options);

// Distributions p(t_0 .. t_n) along prompt + completion: entry j is the
// distribution the model assigns to completion position j (entry n follows
// the last token).
std::vector<ProbDist> completion_distributions(const LanguageModel& model, std::span<const TokenId> prompt,
                                               std::span<const TokenId> completion);

// Window around completion position `pos` with the boundary convention
// (missing neighbours are zero segments).
StateWindow window_at(std::span<const ProbDist> dists, std::size_t pos, std::size_t completion_length,
                      const WindowShape& shape);

}  // namespace capwm
