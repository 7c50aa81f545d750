#include "capwm/toylm/tree_mask.hpp"

#include <algorithm>

#include "capwm/common.hpp"

namespace capwm {

std::size_t AttentionMask::blocked_count() const {
  return static_cast<std::size_t>(std::count(blocked_.begin(), blocked_.end(), true));
}

AttentionMask causal_mask(std::size_t size) {
  AttentionMask mask(size);
  for (std::size_t j = 0; j < size; ++j) {
    for (std::size_t k = j + 1; k < size; ++k) mask.set_blocked(j, k, true);
  }
  return mask;
}

AttentionMask build_tree_mask(std::size_t prefix_len, std::size_t fanout, TreeMaskVariant variant) {
  if (prefix_len < 1) throw UsageError("build_tree_mask: prefix_len must be >= 1");
  if (fanout < 1) throw UsageError("build_tree_mask: fanout must be >= 1");
  const std::size_t n = prefix_len + fanout;
  AttentionMask mask = causal_mask(n);
  for (std::size_t j = prefix_len; j < n; ++j) {
    for (std::size_t k = prefix_len; k < n; ++k) {
      const bool self = j == k;
      if (!self || variant == TreeMaskVariant::kLiteral) mask.set_blocked(j, k, true);
    }
  }
  return mask;
}

}  // namespace capwm
