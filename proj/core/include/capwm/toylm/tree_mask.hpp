#pragma once

#include <cstddef>
#include <vector>

namespace capwm {

// Square pass/blocked matrix over positions; blocked entries have their
// attention score replaced by a large negative sentinel before softmax.
class AttentionMask {
 public:
  explicit AttentionMask(std::size_t size) : size_(size), blocked_(size * size, false) {}

  std::size_t size() const { return size_; }
  bool blocked(std::size_t row, std::size_t col) const { return blocked_[row * size_ + col]; }
  void set_blocked(std::size_t row, std::size_t col, bool value) { blocked_[row * size_ + col] = value; }
  std::size_t blocked_count() const;

  bool operator==(const AttentionMask&) const = default;

 private:
  std::size_t size_;
  std::vector<bool> blocked_;
};

// Added to blocked scores. exp(kMaskSentinel) underflows to exactly zero.
inline constexpr double kMaskSentinel = -1e30;

// Standard lower-triangular causal mask: row j blocks every column k > j.
AttentionMask causal_mask(std::size_t size);

enum class TreeMaskVariant {
  // A candidate sees the prefix and itself.
  kSelfExempt,
  // A candidate sees the prefix only; its own column is blocked as well.
  kLiteral,
};

// Causal mask over `prefix_len` committed positions followed by `fanout`
// sibling candidates that may not attend to one another.
AttentionMask build_tree_mask(std::size_t prefix_len, std::size_t fanout,
                              TreeMaskVariant variant = TreeMaskVariant::kSelfExempt);

}  // namespace capwm
