#pragma once

#include <functional>
#include <memory>
#include <span>

#include "capwm/prf.hpp"
#include "capwm/toylm/language_model.hpp"
#include "capwm/toylm/transformer.hpp"

namespace capwm::testing {

double max_abs_diff(std::span<const double> a, std::span<const double> b);

TokenSeq random_tokens(SplitMix64& rng, std::size_t n, int vocab_size);

// Model whose logits are an arbitrary function of the prefix. Sessions
// recompute from scratch; every branch mode gives the same answer.
class FunctionModel final : public LanguageModel {
 public:
  using Fn = std::function<LogitsRow(std::span<const TokenId>)>;
  FunctionModel(int vocab_size, Fn fn) : vocab_(vocab_size), fn_(std::move(fn)) {}

  int vocab_size() const override { return vocab_; }
  std::string backend_name() const override { return "function"; }
  std::unique_ptr<DecodeSession> open_session() const override;

  LogitsRow logits(std::span<const TokenId> prefix) const { return fn_(prefix); }

 private:
  int vocab_;
  Fn fn_;
};

// Constant zero logits: every next-token distribution is uniform.
FunctionModel uniform_model(int vocab_size);

// Deterministic pseudorandom logits keyed on the last `order` tokens.
FunctionModel hashed_model(int vocab_size, int order, double scale, std::uint64_t seed);

TransformerConfig small_transformer(int vocab_size = 64, int embed_dim = 32, std::uint64_t seed = 7);

}  // namespace capwm::testing
