#include "capwm/capacity/labels.hpp"

namespace capwm {

std::vector<ProbDist> completion_distributions(const LanguageModel& model, std::span<const TokenId> prompt,
                                               std::span<const TokenId> completion) {
  auto session = model.open_session();
  std::vector<ProbDist> dists;
  dists.push_back(softmax(session->extend(prompt)));
  for (TokenId t : completion) dists.push_back(softmax(session->extend(std::span<const TokenId>(&t, 1))));
  return dists;
}

StateWindow window_at(std::span<const ProbDist> dists, std::size_t pos, std::size_t completion_length,
                      const WindowShape& shape) {
  std::vector<const ProbDist*> ptrs;
  for (int k = -shape.left; k <= shape.right; ++k) {
    const auto idx = static_cast<std::ptrdiff_t>(pos) + k;
    const bool inside = idx >= 0 && static_cast<std::size_t>(idx) <= completion_length &&
                        static_cast<std::size_t>(idx) < dists.size();
    ptrs.push_back(inside ? &dists[static_cast<std::size_t>(idx)] : nullptr);
  }
  return build_state_window(ptrs, shape);
}

namespace {

TokenSeq greedy_continue(const LanguageModel& model, std::span<const TokenId> prefix, int budget,
                         std::optional<TokenId> stop) {
  auto session = model.open_session();
  TokenSeq out;
  LogitsRow logits = session->extend(prefix);
  for (int i = 0; i < budget; ++i) {
    const TokenId t = argmax(logits);
    out.push_back(t);
    if (stop && t == *stop) break;
    logits = session->extend(std::span<const TokenId>(&t, 1));
  }
  return out;
}

}  // namespace

LabelingResult gen_labels(std::span<const LabelingInput> corpus, const LanguageModel& model,
                          const AnswerOracle& oracle, const LabelingOptions& options) {
  LabelingResult result;
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    const auto& item = corpus[s];
    const auto answer = oracle(item.completion);
    if (!answer) {
      ++result.skipped;
      continue;
    }
    const auto dists = completion_distributions(model, item.prompt, item.completion);
    const std::size_t n = item.completion.size();
    for (std::size_t i = 0; i < n; ++i) {
      const auto ranked = top_k_indices(dists[i], 2);
      const TokenId replacement = ranked[0] != item.completion[i] ? ranked[0] : ranked[1];

      TokenSeq prefix = item.prompt;
      prefix.insert(prefix.end(), item.completion.begin(), item.completion.begin() + static_cast<std::ptrdiff_t>(i));
      prefix.push_back(replacement);
      TokenSeq altered(item.completion.begin(), item.completion.begin() + static_cast<std::ptrdiff_t>(i));
      altered.push_back(replacement);
      if (!(options.stop_token && replacement == *options.stop_token)) {
        const int budget = static_cast<int>(n - i - 1) + options.extra_tokens;
        const TokenSeq tail = greedy_continue(model, prefix, budget, options.stop_token);
        altered.insert(altered.end(), tail.begin(), tail.end());
      }
      const auto changed = oracle(altered);
      const int label = changed && *changed == *answer ? 1 : 0;
      result.samples.push_back({window_at(dists, i, n, options.shape).features, label});
      result.origin.emplace_back(s, i);
    }
  }
  return result;
}

}  // namespace capwm
