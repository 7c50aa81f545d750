#include "capwm/adaptive/adaptive.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include "capwm/prf.hpp"

namespace capwm {

std::string_view to_string(Outcome outcome) {
  switch (outcome) {
    case Outcome::kNone: return "none";
    case Outcome::kTopK: return "top_k";
    case Outcome::kGlobalBest: return "global_best";
    case Outcome::kGreenBest: return "green_best";
  }
  return "none";
}

namespace {

struct GreenGap {
  TokenId best_green = 0;
  TokenId best_red = 0;
  // max red logit minus max green logit; negative when the argmax is green.
  double gap = 0.0;

  // Whether adding delta to the green logits moves the argmax (lowest id on ties) to best_green.
  bool flips(double delta) const { return delta > gap || (delta == gap && best_green < best_red); }
};

GreenGap green_gap(std::span<const double> logits, const GreenPartition& partition) {
  double best_green = -std::numeric_limits<double>::infinity();
  double best_red = -std::numeric_limits<double>::infinity();
  GreenGap out;
  for (std::size_t t = 0; t < logits.size(); ++t) {
    const auto id = static_cast<TokenId>(t);
    if (partition.is_green(id)) {
      if (logits[t] > best_green) {
        best_green = logits[t];
        out.best_green = id;
      }
    } else if (logits[t] > best_red) {
      best_red = logits[t];
      out.best_red = id;
    }
  }
  out.gap = best_red - best_green;
  return out;
}

void push_unique(std::vector<TokenId>& list, TokenId t) {
  if (std::find(list.begin(), list.end(), t) == list.end()) list.push_back(t);
}

// Everything the loop needs about the watermark at one position.
struct StepContext {
  ProbDist dist;
  ContextSeed seed;
  std::optional<GreenPartition> partition;
  StrategySet strategies;
  TokenId greedy = 0;
};

StepContext prepare_step(std::span<const double> logits, std::span<const TokenId> prefix, const WatermarkKey& key,
                         const SchemeConfig& scheme, double beta) {
  StepContext step;
  step.dist = softmax(logits);
  step.seed = context_seed(key, prefix, scheme.hash_window);
  if (scheme.reweighting()) {
    step.partition = partition_vocab(step.seed, scheme.gamma, static_cast<int>(logits.size()));
  }
  step.strategies = enumerate_strategies(step.dist, logits, scheme, step.seed, beta,
                                         step.partition ? &*step.partition : nullptr);
  step.greedy = step.strategies.unique_candidates.front();
  return step;
}

struct Decision {
  Outcome outcome = Outcome::kNone;
  int top_k = 0;
  double delta = 0.0;
  TokenId token = 0;
};

Decision apply_strength(const StepContext& step, std::span<const double> logits, const SchemeConfig& scheme,
                        const std::optional<Strength>& strength) {
  Decision d;
  d.token = step.greedy;
  if (!strength) return d;
  if (scheme.kind == SchemeKind::kExp) {
    d.outcome = Outcome::kTopK;
    d.top_k = strength->top_k;
    d.token = exp_sample(step.dist, step.seed, strength->top_k);
    return d;
  }
  d.delta = strength->delta;
  const auto gg = green_gap(logits, *step.partition);
  if (gg.flips(strength->delta)) {
    d.outcome = Outcome::kGreenBest;
    d.token = gg.best_green;
  } else {
    d.outcome = Outcome::kGlobalBest;
  }
  return d;
}

TokenId sample_from(std::span<const double> dist, SplitMix64& rng) {
  const double u = rng.uniform_open();
  double acc = 0.0;
  TokenId last = 0;
  for (std::size_t t = 0; t < dist.size(); ++t) {
    if (dist[t] <= 0.0) continue;
    acc += dist[t];
    last = static_cast<TokenId>(t);
    if (u < acc) return last;
  }
  return last;
}

// Sampling counterpart of apply_strength.
Decision sample_strength(const StepContext& step, std::span<const double> logits, const SchemeConfig& scheme,
                         const std::optional<Strength>& strength, SplitMix64& rng) {
  Decision d;
  if (!strength) {
    d.token = sample_from(step.dist, rng);
    return d;
  }
  if (scheme.kind == SchemeKind::kExp) return apply_strength(step, logits, scheme, strength);
  d.delta = strength->delta;
  d.token = sample_from(softmax(reweight_logits(logits, *step.partition, strength->delta)), rng);
  d.outcome = step.partition->is_green(d.token) ? Outcome::kGreenBest : Outcome::kGlobalBest;
  return d;
}

void check_prompt(std::span<const TokenId> prompt, int max_new_tokens) {
  if (prompt.empty()) throw UsageError("prompt must be non-empty");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
}

StateWindow step_window(const std::deque<ProbDist>& history, const ProbDist& current, const ProbDist* future,
                        const WindowShape& shape) {
  std::vector<const ProbDist*> ptrs;
  for (int k = shape.left; k >= 1; --k) {
    const auto back = static_cast<std::size_t>(k);
    ptrs.push_back(history.size() >= back ? &history[history.size() - back] : nullptr);
  }
  ptrs.push_back(&current);
  if (shape.right == 1) ptrs.push_back(future);
  return build_state_window(ptrs, shape);
}

void check_shape(const WindowShape& shape) {
  if (shape.right > 1) throw ConfigError("capacity window may look at most one position ahead");
}

TraceRecord make_record(std::size_t pos, const StepContext& step, double score, const Decision& d) {
  return {pos,  hash_distribution(step.dist), score, d.outcome, d.top_k, d.delta, step.greedy,
          d.token, step.strategies.unique_candidates};
}

}  // namespace

StrategySet enumerate_strategies(std::span<const double> dist, std::span<const double> logits,
                                 const SchemeConfig& scheme, ContextSeed seed, double beta,
                                 const GreenPartition* partition) {
  if (dist.size() != logits.size() || dist.empty()) throw UsageError("dist and logits must match and be non-empty");
  StrategySet set;
  const TokenId greedy = argmax(logits);
  set.unique_candidates.push_back(greedy);
  if (scheme.kind == SchemeKind::kExp) {
    const long n = std::lround(beta * scheme.top_k);
    if (n < 1) throw ConfigError("round(beta * top_k) must be >= 1");
    const int limit = static_cast<int>(std::min<long>(n, static_cast<long>(dist.size())));
    for (int k = 1; k <= limit; ++k) {
      const TokenId t = exp_sample(dist, seed, k);
      set.strategies.push_back({Outcome::kTopK, k, t});
      push_unique(set.unique_candidates, t);
    }
    return set;
  }
  if (partition == nullptr) throw UsageError("reweighting schemes need a green partition");
  const auto gg = green_gap(logits, *partition);
  set.strategies.push_back({Outcome::kGlobalBest, 0, greedy});
  set.strategies.push_back({Outcome::kGreenBest, 0, gg.best_green});
  push_unique(set.unique_candidates, gg.best_green);
  return set;
}

void CAWConfig::validate(int vocab_size) const {
  if (!(theta > 0.0 && theta < 1.0)) throw ConfigError("theta must lie in (0, 1)");
  if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  scheme.validate(vocab_size);
  if (scheme.kind == SchemeKind::kExp) {
    const int k = max_top_k(*this);
    if (k < 1 || k > vocab_size) throw ConfigError("round(beta * top_k) must lie in [1, V]");
  }
}

int max_top_k(const CAWConfig& config) { return static_cast<int>(std::lround(config.beta * config.scheme.top_k)); }

std::optional<Strength> map_capacity_to_strength(double capacity, const CAWConfig& config) {
  if (capacity >= config.theta) return std::nullopt;
  const double scale = config.beta * (config.theta - capacity) / config.theta;
  Strength s;
  if (config.scheme.kind == SchemeKind::kExp) {
    const int hi = max_top_k(config);
    s.top_k = std::clamp(static_cast<int>(std::lround(scale * config.scheme.top_k)), 1, std::max(1, hi));
  } else {
    s.delta = scale * config.scheme.delta;
  }
  return s;
}

FunctionCapacity constant_capacity(double value, WindowShape shape) {
  return FunctionCapacity(shape, [value](const StateWindow&) { return value; });
}

std::uint64_t hash_distribution(std::span<const double> dist) {
  const auto bytes = std::as_bytes(dist);
  return digest_bytes({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
}

GenerationOutput generate_wm(const LanguageModel& model, std::span<const TokenId> prompt, const WatermarkKey& key,
                             const CAWConfig& config, const CapacitySource& capacity, BranchMode mode) {
  check_prompt(prompt, config.max_new_tokens);
  config.validate(model.vocab_size());
  check_shape(capacity.shape());

  GenerationOutput out;
  auto session = model.open_session();
  TokenSeq prefix(prompt.begin(), prompt.end());
  LogitsRow logits = session->extend(prompt);
  std::deque<ProbDist> history;

  for (int i = 0; i < config.max_new_tokens; ++i) {
    StepContext step = prepare_step(logits, prefix, key, config.scheme, config.beta);
    const BranchSet branches = session->branch(step.strategies.unique_candidates, mode);
    const ProbDist future = softmax(branches.logits.front());
    const double c = capacity.score(step_window(history, step.dist, &future, capacity.shape()));
    const Decision d = apply_strength(step, logits, config.scheme, map_capacity_to_strength(c, config));

    const auto& cands = branches.candidates;
    const auto idx = static_cast<std::size_t>(std::find(cands.begin(), cands.end(), d.token) - cands.begin());
    if (idx == cands.size()) throw std::logic_error("selected token missing from the candidate set");
    session->commit(branches, idx);
    logits = branches.logits[idx];

    out.trace.push_back(make_record(static_cast<std::size_t>(i), step, c, d));
    out.tokens.push_back(d.token);
    prefix.push_back(d.token);
    history.push_back(std::move(step.dist));
    if (history.size() > static_cast<std::size_t>(capacity.shape().left)) history.pop_front();
    if (config.stop_token && d.token == *config.stop_token) break;
  }
  out.counters = session->counters();
  return out;
}

TokenSeq generate_wm_reference(const LanguageModel& model, std::span<const TokenId> prompt, const WatermarkKey& key,
                               const CAWConfig& config, const CapacitySource& capacity) {
  check_prompt(prompt, config.max_new_tokens);
  config.validate(model.vocab_size());
  check_shape(capacity.shape());

  TokenSeq prefix(prompt.begin(), prompt.end());
  TokenSeq out;
  std::deque<ProbDist> history;
  for (int i = 0; i < config.max_new_tokens; ++i) {
    const LogitsRow logits = next_logits(model, prefix);
    const ProbDist dist = softmax(logits);
    const ContextSeed seed = context_seed(key, prefix, config.scheme.hash_window);
    const TokenId greedy = argmax(logits);

    TokenSeq extended = prefix;
    extended.push_back(greedy);
    const ProbDist future = softmax(next_logits(model, extended));
    const double c = capacity.score(step_window(history, dist, &future, capacity.shape()));

    TokenId chosen = greedy;
    if (c < config.theta) {
      const double scale = config.beta * (config.theta - c) / config.theta;
      if (config.scheme.kind == SchemeKind::kExp) {
        const long k = std::clamp<long>(std::lround(scale * config.scheme.top_k), 1, max_top_k(config));
        chosen = exp_sample(dist, seed, static_cast<int>(k));
      } else {
        const auto partition = partition_vocab(seed, config.scheme.gamma, model.vocab_size());
        const auto gg = green_gap(logits, partition);
        if (gg.flips(scale * config.scheme.delta)) chosen = gg.best_green;
      }
    }
    out.push_back(chosen);
    prefix.push_back(chosen);
    history.push_back(dist);
    if (history.size() > static_cast<std::size_t>(capacity.shape().left)) history.pop_front();
    if (config.stop_token && chosen == *config.stop_token) break;
  }
  return out;
}

namespace {

template <typename Gate>
GenerationOutput generate_gated(const LanguageModel& model, std::span<const TokenId> prompt, const WatermarkKey& key,
                                const SchemeConfig& scheme, const GenerationLimits& limits, Gate gate) {
  check_prompt(prompt, limits.max_new_tokens);
  scheme.validate(model.vocab_size());
  GenerationOutput out;
  auto session = model.open_session();
  TokenSeq prefix(prompt.begin(), prompt.end());
  LogitsRow logits = session->extend(prompt);
  const std::optional<Strength> full = Strength{scheme.top_k, scheme.delta};
  std::optional<SplitMix64> rng;
  if (limits.sampling_seed) rng.emplace(*limits.sampling_seed);
  for (int i = 0; i < limits.max_new_tokens; ++i) {
    const StepContext step = prepare_step(logits, prefix, key, scheme, 1.0);
    const auto [open, score] = gate(step.dist);
    const auto strength = open ? full : std::nullopt;
    const Decision d =
        rng ? sample_strength(step, logits, scheme, strength, *rng) : apply_strength(step, logits, scheme, strength);
    out.trace.push_back(make_record(static_cast<std::size_t>(i), step, score, d));
    out.tokens.push_back(d.token);
    prefix.push_back(d.token);
    if (limits.stop_token && d.token == *limits.stop_token) break;
    logits = session->extend(std::span<const TokenId>(&d.token, 1));
  }
  out.counters = session->counters();
  return out;
}

}  // namespace

GenerationOutput generate_greedy(const LanguageModel& model, std::span<const TokenId> prompt,
                                 const GenerationLimits& limits) {
  check_prompt(prompt, limits.max_new_tokens);
  GenerationOutput out;
  auto session = model.open_session();
  LogitsRow logits = session->extend(prompt);
  std::optional<SplitMix64> rng;
  if (limits.sampling_seed) rng.emplace(*limits.sampling_seed);
  for (int i = 0; i < limits.max_new_tokens; ++i) {
    const TokenId t = rng ? sample_from(softmax(logits), *rng) : argmax(logits);
    out.tokens.push_back(t);
    if (limits.stop_token && t == *limits.stop_token) break;
    logits = session->extend(std::span<const TokenId>(&t, 1));
  }
  out.counters = session->counters();
  return out;
}

GenerationOutput generate_wm_plain(const LanguageModel& model, std::span<const TokenId> prompt,
                                   const WatermarkKey& key, const SchemeConfig& scheme,
                                   const GenerationLimits& limits) {
  return generate_gated(model, prompt, key, scheme, limits,
                        [](const ProbDist&) { return std::pair<bool, double>{true, 1.0}; });
}

GenerationOutput generate_wm_entropy_gated(const LanguageModel& model, std::span<const TokenId> prompt,
                                           const WatermarkKey& key, const SchemeConfig& scheme,
                                           double entropy_threshold, const GenerationLimits& limits) {
  if (!(entropy_threshold >= 0.0 && entropy_threshold <= 1.0)) {
    throw ConfigError("entropy threshold must lie in [0, 1]");
  }
  return generate_gated(model, prompt, key, scheme, limits, [entropy_threshold](const ProbDist& dist) {
    const double h = normalized_entropy(dist);
    return std::pair<bool, double>{h >= entropy_threshold, h};
  });
}

}  // namespace capwm
