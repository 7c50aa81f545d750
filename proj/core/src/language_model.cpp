#include "capwm/toylm/language_model.hpp"

#include <algorithm>

namespace capwm {

LogitsRow next_logits(const LanguageModel& model, std::span<const TokenId> prefix) {
  if (prefix.empty()) throw UsageError("next_logits: empty prefix");
  auto session = model.open_session();
  return session->extend(prefix);
}

void check_candidates(std::span<const TokenId> candidates, int vocab_size) {
  if (candidates.empty()) throw UsageError("candidate list is empty");
  std::vector<TokenId> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw UsageError("candidate list contains duplicates");
  }
  if (sorted.front() < 0 || sorted.back() >= vocab_size) {
    throw UsageError("candidate token outside the vocabulary");
  }
}

}  // namespace capwm
