#include "support.hpp"

#include <algorithm>
#include <cmath>

namespace capwm::testing {

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TokenSeq random_tokens(SplitMix64& rng, std::size_t n, int vocab_size) {
  TokenSeq out(n);
  for (auto& t : out) t = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(vocab_size)));
  return out;
}

namespace {

class FunctionSession final : public DecodeSession {
 public:
  explicit FunctionSession(const FunctionModel& model) : model_(model) {}

  LogitsRow extend(std::span<const TokenId> tokens) override {
    if (tokens.empty()) throw UsageError("extend: no tokens");
    prefix_.insert(prefix_.end(), tokens.begin(), tokens.end());
    ++counters_.extend_calls;
    counters_.rows_computed += tokens.size();
    return model_.logits(prefix_);
  }

  BranchSet branch(std::span<const TokenId> candidates, BranchMode) override {
    check_candidates(candidates, model_.vocab_size());
    ++counters_.branch_calls;
    counters_.rows_computed += candidates.size();
    BranchSet set;
    set.candidates.assign(candidates.begin(), candidates.end());
    TokenSeq ext = prefix_;
    ext.push_back(0);
    for (TokenId c : candidates) {
      ext.back() = c;
      set.logits.push_back(model_.logits(ext));
      set.state.emplace_back();
    }
    return set;
  }

  void commit(const BranchSet& branches, std::size_t index) override {
    ++counters_.commit_calls;
    prefix_.push_back(branches.candidates.at(index));
  }

  std::size_t length() const override { return prefix_.size(); }

 private:
  const FunctionModel& model_;
  TokenSeq prefix_;
};

}  // namespace

std::unique_ptr<DecodeSession> FunctionModel::open_session() const { return std::make_unique<FunctionSession>(*this); }

FunctionModel uniform_model(int vocab_size) {
  return FunctionModel(vocab_size, [vocab_size](std::span<const TokenId>) { return LogitsRow(vocab_size, 0.0); });
}

FunctionModel hashed_model(int vocab_size, int order, double scale, std::uint64_t seed) {
  return FunctionModel(vocab_size, [=](std::span<const TokenId> prefix) {
    std::uint64_t h = seed;
    const std::size_t n = std::min<std::size_t>(prefix.size(), static_cast<std::size_t>(order));
    for (std::size_t i = prefix.size() - n; i < prefix.size(); ++i) h = mix64(h ^ static_cast<std::uint64_t>(prefix[i]));
    SplitMix64 rng(h);
    LogitsRow row(vocab_size);
    for (auto& x : row) x = scale * rng.normal();
    return row;
  });
}

TransformerConfig small_transformer(int vocab_size, int embed_dim, std::uint64_t seed) {
  TransformerConfig c;
  c.vocab_size = vocab_size;
  c.embed_dim = embed_dim;
  c.layers = 2;
  c.heads = 4;
  c.seed = seed;
  return c;
}

}  // namespace capwm::testing
