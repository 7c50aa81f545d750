#include "capwm/attacks/attacks.hpp"

#include <algorithm>
#include <nlohmann/json.hpp>

#include "capwm/prf.hpp"

namespace capwm {

namespace {

void check_p(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("attack probability must lie in [0, 1]");
}

}  // namespace

SynonymTable::SynonymTable(std::vector<int> class_of) : class_of_(std::move(class_of)) {
  if (class_of_.size() < 2) throw ConfigError("synonym table needs at least two tokens");
}

std::vector<TokenId> SynonymTable::alternatives(TokenId t) const {
  std::vector<TokenId> out;
  const int c = class_of(t);
  for (std::size_t u = 0; u < class_of_.size(); ++u) {
    if (class_of_[u] == c && static_cast<TokenId>(u) != t) out.push_back(static_cast<TokenId>(u));
  }
  return out;
}

void to_json(nlohmann::json& j, const SynonymTable& table) { j = {{"classes", table.classes()}}; }

SynonymTable synonym_table_from_json(const nlohmann::json& j) {
  try {
    return SynonymTable(j.at("classes").get<std::vector<int>>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad synonym table: ") + e.what());
  }
}

std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::kWordSub: return "word_sub";
    case AttackKind::kWordDel: return "word_del";
    case AttackKind::kWordSubContext: return "word_sub_context";
  }
  return "word_sub";
}

AttackKind attack_kind_from_string(std::string_view name) {
  for (AttackKind k : {AttackKind::kWordSub, AttackKind::kWordDel, AttackKind::kWordSubContext}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown attack '" + std::string(name) + "'");
}

TokenSeq word_sub(std::span<const TokenId> text, double p, std::uint64_t seed, const SynonymTable& table) {
  check_p(p);
  SplitMix64 rng(seed);
  const auto V = static_cast<std::uint64_t>(table.vocab_size());
  TokenSeq out(text.begin(), text.end());
  for (auto& t : out) {
    if (!rng.bernoulli(p)) continue;
    const auto alts = table.alternatives(t);
    if (!alts.empty()) {
      t = alts[rng.below(alts.size())];
    } else {
      // Uniform over the other V - 1 tokens.
      const auto r = static_cast<TokenId>(rng.below(V - 1));
      t = r >= t ? r + 1 : r;
    }
  }
  return out;
}

TokenSeq word_del(std::span<const TokenId> text, double p, std::uint64_t seed) {
  check_p(p);
  SplitMix64 rng(seed);
  TokenSeq out;
  for (TokenId t : text) {
    if (!rng.bernoulli(p)) out.push_back(t);
  }
  return out;
}

TokenSeq word_sub_context(std::span<const TokenId> text, double p, const LanguageModel& model, int topk,
                          std::uint64_t seed, std::span<const TokenId> lead) {
  check_p(p);
  if (topk < 2 || topk > model.vocab_size()) throw ConfigError("contextual substitution needs 2 <= topk <= V");
  SplitMix64 rng(seed);
  TokenSeq context(lead.begin(), lead.end());
  TokenSeq out(text.begin(), text.end());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (rng.bernoulli(p) && !context.empty()) {
      auto pool = top_k_indices(next_logits(model, context), static_cast<std::size_t>(topk));
      pool.erase(std::remove(pool.begin(), pool.end(), text[i]), pool.end());
      out[i] = pool[rng.below(pool.size())];
    }
    context.push_back(text[i]);
  }
  return out;
}

void AttackConfig::validate() const {
  check_p(p);
  if (kind == AttackKind::kWordSubContext && topk < 2) throw ConfigError("contextual substitution needs topk >= 2");
}

TokenSeq apply_attack(std::span<const TokenId> text, const AttackConfig& config, const SynonymTable& table,
                      const LanguageModel* model, std::span<const TokenId> lead) {
  config.validate();
  switch (config.kind) {
    case AttackKind::kWordSub: return word_sub(text, config.p, config.seed, table);
    case AttackKind::kWordDel: return word_del(text, config.p, config.seed);
    case AttackKind::kWordSubContext:
      if (model == nullptr) throw ConfigError("contextual substitution needs a model");
      return word_sub_context(text, config.p, *model, config.topk, config.seed, lead);
  }
  return {};
}

}  // namespace capwm
