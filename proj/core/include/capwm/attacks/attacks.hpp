#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json_fwd.hpp>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "capwm/common.hpp"
#include "capwm/toylm/language_model.hpp"

namespace capwm {

// Partition of the vocabulary into synonym classes.
class SynonymTable {
 public:
  // class_of[t] is the class tag of token t.
  explicit SynonymTable(std::vector<int> class_of);

  int vocab_size() const { return static_cast<int>(class_of_.size()); }
  int class_of(TokenId t) const { return class_of_[static_cast<std::size_t>(t)]; }
  // Other members of t's class; empty for a singleton.
  std::vector<TokenId> alternatives(TokenId t) const;
  const std::vector<int>& classes() const { return class_of_; }

 private:
  std::vector<int> class_of_;
};

void to_json(nlohmann::json& j, const SynonymTable& table);
SynonymTable synonym_table_from_json(const nlohmann::json& j);

enum class AttackKind { kWordSub, kWordDel, kWordSubContext };

std::string_view to_string(AttackKind kind);
AttackKind attack_kind_from_string(std::string_view name);

// Each token replaced with probability p by a uniform other member of its
// class, or a uniform other token when the class is a singleton.
TokenSeq word_sub(std::span<const TokenId> text, double p, std::uint64_t seed, const SynonymTable& table);

// Each token deleted with probability p.
TokenSeq word_del(std::span<const TokenId> text, double p, std::uint64_t seed);

// Each selected token replaced by a uniform draw from the model's top-k
// predictions for its preceding context, excluding the original. `lead` is
// prepended to the context so the first position has one; positions with an
// empty context are left alone.
TokenSeq word_sub_context(std::span<const TokenId> text, double p, const LanguageModel& model, int topk,
                          std::uint64_t seed, std::span<const TokenId> lead = {});

struct AttackConfig {
  AttackKind kind = AttackKind::kWordSub;
  double p = 0.1;
  std::uint64_t seed = 0;
  int topk = 5;

  void validate() const;
};

// Dispatch on config.kind. `model` is only used by the contextual attack.
TokenSeq apply_attack(std::span<const TokenId> text, const AttackConfig& config, const SynonymTable& table,
                      const LanguageModel* model, std::span<const TokenId> lead = {});

}  // namespace capwm
