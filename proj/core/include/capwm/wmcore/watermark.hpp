#pragma once

#include <cstdint>
#include <nlohmann/json_fwd.hpp>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "capwm/common.hpp"

namespace capwm {

// Secret key shared by generator and detector. At least 16 bytes.
class WatermarkKey {
 public:
  explicit WatermarkKey(std::vector<std::uint8_t> bytes);

  static WatermarkKey from_hex(std::string_view hex);
  // Deterministic 16-byte key derived from an integer, for experiments.
  static WatermarkKey from_seed(std::uint64_t seed);

  std::string to_hex() const;
  std::uint64_t digest() const { return digest_; }
  std::span<const std::uint8_t> bytes() const { return bytes_; }

  bool operator==(const WatermarkKey& other) const { return bytes_ == other.bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::uint64_t digest_;
};

struct ContextSeed {
  std::uint64_t value = 0;
  bool operator==(const ContextSeed&) const = default;
};

// Seed from the key and the last `window` tokens of `prefix`. A zero window
// depends on the key alone. A prefix shorter than the window hashes every
// available token plus a length tag.
ContextSeed context_seed(const WatermarkKey& key, std::span<const TokenId> prefix, int window);

class GreenPartition {
 public:
  GreenPartition(std::vector<TokenId> green, int vocab_size, double gamma);

  bool is_green(TokenId t) const { return member_[static_cast<std::size_t>(t)]; }
  const std::vector<TokenId>& green() const { return green_; }
  int vocab_size() const { return static_cast<int>(member_.size()); }
  double gamma() const { return gamma_; }

 private:
  std::vector<TokenId> green_;
  std::vector<bool> member_;
  double gamma_;
};

// Number of green tokens for (gamma, V): round(gamma * V).
int green_list_size(double gamma, int vocab_size);

// Seeded Fisher-Yates shuffle of [0, V); the first round(gamma * V) entries are green.
GreenPartition partition_vocab(ContextSeed seed, double gamma, int vocab_size);

// Adds `delta` to every green entry.
LogitsRow reweight_logits(std::span<const double> logits, const GreenPartition& partition, double delta);

// Keyed pseudorandom value F(t) in the open interval (0, 1).
double exp_hash_value(ContextSeed seed, TokenId token);

// F(t) for every t in [0, V).
std::vector<double> exp_hash_map(ContextSeed seed, int vocab_size);

// argmax over the top_k most probable tokens (ties to lower id, zero-probability
// tokens excluded) of F(t)^(1/p(t)), computed as ln F(t) / p(t).
TokenId exp_sample(std::span<const double> dist, ContextSeed seed, int top_k);

enum class SchemeKind { kKgw, kUnigram, kExp };

std::string_view to_string(SchemeKind kind);
SchemeKind scheme_kind_from_string(std::string_view name);

struct SchemeConfig {
  SchemeKind kind = SchemeKind::kKgw;
  double gamma = 0.25;
  double delta = 2.0;
  int top_k = 4;
  int hash_window = 1;

  bool reweighting() const { return kind != SchemeKind::kExp; }
  void validate(int vocab_size) const;

  static SchemeConfig kgw(double delta, double gamma = 0.25, int hash_window = 1);
  static SchemeConfig unigram(double delta, double gamma = 0.25);
  static SchemeConfig exp(int top_k, int hash_window = 1);

  bool operator==(const SchemeConfig&) const = default;
};

void to_json(nlohmann::json& j, const SchemeConfig& config);
void from_json(const nlohmann::json& j, SchemeConfig& config);

}  // namespace capwm
