#include "capwm/wmcore/watermark.hpp"

#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>

#include "capwm/prf.hpp"

namespace capwm {
namespace {

constexpr std::uint64_t kTokenSalt = 0xD6E8FEB86659FD93ULL;
constexpr std::uint64_t kLengthTag = 0xA0761D6478BD642FULL;
constexpr std::uint64_t kExpSalt = 0xE7037ED1A0B428DBULL;

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

}  // namespace

WatermarkKey::WatermarkKey(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {
  if (bytes_.size() < 16) throw ConfigError("watermark key must be at least 16 bytes");
  digest_ = digest_bytes(bytes_);
}

WatermarkKey WatermarkKey::from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) throw ConfigError("watermark key hex has odd length");
  std::vector<std::uint8_t> bytes;
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    const int hi = hex_value(hex[i]);
    const int lo = hex_value(hex[i + 1]);
    if (hi < 0 || lo < 0) throw ConfigError("watermark key is not valid hex");
    bytes.push_back(static_cast<std::uint8_t>(hi * 16 + lo));
  }
  return WatermarkKey(std::move(bytes));
}

WatermarkKey WatermarkKey::from_seed(std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<std::uint8_t> bytes;
  for (int w = 0; w < 2; ++w) {
    const std::uint64_t x = rng.next();
    for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<std::uint8_t>(x >> (8 * b)));
  }
  return WatermarkKey(std::move(bytes));
}

std::string WatermarkKey::to_hex() const {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  for (std::uint8_t b : bytes_) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xF]);
  }
  return out;
}

ContextSeed context_seed(const WatermarkKey& key, std::span<const TokenId> prefix, int window) {
  if (window < 0) throw ConfigError("hash window must be >= 0");
  std::uint64_t z = mix64(key.digest());
  if (window == 0) return {z};
  const std::size_t w = static_cast<std::size_t>(window);
  const std::size_t available = std::min(w, prefix.size());
  for (std::size_t i = prefix.size() - available; i < prefix.size(); ++i) {
    z = mix64(z ^ (static_cast<std::uint64_t>(static_cast<std::uint32_t>(prefix[i])) * kTokenSalt));
  }
  if (available < w) z = mix64(z ^ (kLengthTag + available));
  return {z};
}

GreenPartition::GreenPartition(std::vector<TokenId> green, int vocab_size, double gamma)
    : green_(std::move(green)), member_(static_cast<std::size_t>(vocab_size), false), gamma_(gamma) {
  for (TokenId t : green_) member_[static_cast<std::size_t>(t)] = true;
}

int green_list_size(double gamma, int vocab_size) {
  return static_cast<int>(std::lround(gamma * vocab_size));
}

GreenPartition partition_vocab(ContextSeed seed, double gamma, int vocab_size) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
  if (vocab_size < 2) throw ConfigError("vocabulary size must be >= 2");
  const int size = green_list_size(gamma, vocab_size);
  std::vector<TokenId> perm(static_cast<std::size_t>(vocab_size));
  std::iota(perm.begin(), perm.end(), 0);
  SplitMix64 rng(seed.value);
  // Only the first `size` slots are needed.
  for (int i = 0; i < size; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(static_cast<std::uint64_t>(vocab_size - i));
    std::swap(perm[static_cast<std::size_t>(i)], perm[j]);
  }
  perm.resize(static_cast<std::size_t>(size));
  return GreenPartition(std::move(perm), vocab_size, gamma);
}

LogitsRow reweight_logits(std::span<const double> logits, const GreenPartition& partition, double delta) {
  if (logits.size() != static_cast<std::size_t>(partition.vocab_size())) {
    throw UsageError("reweight_logits: logits and partition sizes differ");
  }
  LogitsRow out(logits.begin(), logits.end());
  for (TokenId t : partition.green()) out[static_cast<std::size_t>(t)] += delta;
  return out;
}

double exp_hash_value(ContextSeed seed, TokenId token) {
  const std::uint64_t x = mix64(seed.value ^ mix64(kExpSalt + static_cast<std::uint32_t>(token)));
  return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53;
}

std::vector<double> exp_hash_map(ContextSeed seed, int vocab_size) {
  if (vocab_size < 1) throw ConfigError("vocabulary size must be >= 1");
  std::vector<double> out(static_cast<std::size_t>(vocab_size));
  for (int t = 0; t < vocab_size; ++t) out[static_cast<std::size_t>(t)] = exp_hash_value(seed, t);
  return out;
}

TokenId exp_sample(std::span<const double> dist, ContextSeed seed, int top_k) {
  if (top_k < 1 || static_cast<std::size_t>(top_k) > dist.size()) throw ConfigError("top_k must lie in [1, V]");
  const auto pool = top_k_indices(dist, static_cast<std::size_t>(top_k));
  TokenId best = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  for (TokenId t : pool) {
    const double p = dist[static_cast<std::size_t>(t)];
    if (!(p > 0.0)) continue;
    const double score = std::log(exp_hash_value(seed, t)) / p;
    if (best < 0 || score > best_score || (score == best_score && t < best)) {
      best = t;
      best_score = score;
    }
  }
  if (best < 0) throw DataError("exp_sample: no candidate with positive probability");
  return best;
}

std::string_view to_string(SchemeKind kind) {
  switch (kind) {
    case SchemeKind::kKgw: return "kgw";
    case SchemeKind::kUnigram: return "unigram";
    case SchemeKind::kExp: return "exp";
  }
  return "?";
}

SchemeKind scheme_kind_from_string(std::string_view name) {
  if (name == "kgw" || name == "KGW") return SchemeKind::kKgw;
  if (name == "unigram" || name == "Unigram") return SchemeKind::kUnigram;
  if (name == "exp" || name == "EXP") return SchemeKind::kExp;
  throw ConfigError("unknown watermark scheme '" + std::string(name) + "'");
}

void SchemeConfig::validate(int vocab_size) const {
  if (hash_window < 0 || hash_window > 4) throw ConfigError("hash_window must lie in [0, 4]");
  switch (kind) {
    case SchemeKind::kKgw:
    case SchemeKind::kUnigram:
      if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
      if (!(delta >= 0.0)) throw ConfigError("delta must be nonnegative");
      if (kind == SchemeKind::kKgw && hash_window < 1) throw ConfigError("KGW requires hash_window >= 1");
      if (kind == SchemeKind::kUnigram && hash_window != 0) throw ConfigError("Unigram requires hash_window = 0");
      break;
    case SchemeKind::kExp:
      if (top_k < 1 || top_k > vocab_size) throw ConfigError("EXP requires 1 <= top_k <= V");
      break;
  }
}

SchemeConfig SchemeConfig::kgw(double delta, double gamma, int hash_window) {
  return {SchemeKind::kKgw, gamma, delta, 1, hash_window};
}

SchemeConfig SchemeConfig::unigram(double delta, double gamma) { return {SchemeKind::kUnigram, gamma, delta, 1, 0}; }

SchemeConfig SchemeConfig::exp(int top_k, int hash_window) {
  return {SchemeKind::kExp, 0.25, 0.0, top_k, hash_window};
}

void to_json(nlohmann::json& j, const SchemeConfig& c) {
  j = {{"kind", std::string(to_string(c.kind))},
       {"gamma", c.gamma},
       {"delta", c.delta},
       {"top_k", c.top_k},
       {"hash_window", c.hash_window}};
}

void from_json(const nlohmann::json& j, SchemeConfig& c) {
  c.kind = scheme_kind_from_string(j.at("kind").get<std::string>());
  SchemeConfig defaults = c.kind == SchemeKind::kUnigram ? SchemeConfig::unigram(2.0)
                          : c.kind == SchemeKind::kExp   ? SchemeConfig::exp(4)
                                                         : SchemeConfig::kgw(2.0);
  c.gamma = j.value("gamma", defaults.gamma);
  c.delta = j.value("delta", defaults.delta);
  c.top_k = j.value("top_k", defaults.top_k);
  c.hash_window = j.value("hash_window", defaults.hash_window);
}

}  // namespace capwm
