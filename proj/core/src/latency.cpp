#include "capwm/harness/latency.hpp"

#include <chrono>
#include <functional>
#include <nlohmann/json.hpp>

#include "capwm/prf.hpp"

namespace capwm {

TransformerConfig latency_model_config() {
  TransformerConfig c;
  c.vocab_size = 64;
  c.embed_dim = 256;
  c.layers = 2;
  c.heads = 4;
  c.seed = 7;
  return c;
}

void LatencyConfig::validate() const {
  model.validate();
  if (prompt_length < 1 || new_tokens < 1) throw ConfigError("prompt_length and new_tokens must be >= 1");
  if (runs < 1 || warmup < 0) throw ConfigError("runs must be >= 1 and warmup >= 0");
  scheme.validate(model.vocab_size);
  if (!(theta > 0.0 && theta < 1.0) || !(beta > 0.0)) throw ConfigError("need 0 < theta < 1 and beta > 0");
}

Report bench_latency(const LatencyConfig& config) {
  config.validate();
  const TransformerModel model(config.model);
  const WindowShape shape{default_top_m(config.model.vocab_size), 1, 1};
  const EvaluatorCapacity capacity(init_evaluator(shape, 64, 32, mix64(config.seed)));
  return bench_latency(config, model, capacity);
}

Report bench_latency(const LatencyConfig& config, const LanguageModel& model, const CapacitySource& capacity) {
  config.validate();
  SplitMix64 rng(config.seed);
  TokenSeq prompt;
  for (int i = 0; i < config.prompt_length; ++i) {
    prompt.push_back(static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(model.vocab_size()))));
  }
  const WatermarkKey key = WatermarkKey::from_seed(rng.next());
  const GenerationLimits limits{config.new_tokens, std::nullopt, std::nullopt};
  CAWConfig caw;
  caw.theta = config.theta;
  caw.beta = config.beta;
  caw.scheme = config.scheme;
  caw.max_new_tokens = config.new_tokens;

  struct Mode {
    std::string name;
    std::function<GenerationOutput()> run;
    double total_ms = 0.0;
    GenerationOutput last;
  };
  std::vector<Mode> modes;
  modes.push_back({"unwatermarked", [&] { return generate_greedy(model, prompt, limits); }, 0.0, {}});
  modes.push_back({"plain", [&] { return generate_wm_plain(model, prompt, key, config.scheme, limits); }, 0.0, {}});
  modes.push_back({"caw_tree", [&] { return generate_wm(model, prompt, key, caw, capacity, BranchMode::kTree); }, 0.0, {}});
  modes.push_back({"caw_sequential", [&] { return generate_wm(model, prompt, key, caw, capacity, BranchMode::kSequential); }, 0.0, {}});
  modes.push_back({"caw_batched", [&] { return generate_wm(model, prompt, key, caw, capacity, BranchMode::kBatched); }, 0.0, {}});

  for (int w = 0; w < config.warmup; ++w) {
    for (auto& m : modes) m.last = m.run();
  }
  for (int r = 0; r < config.runs; ++r) {
    for (auto& m : modes) {
      const auto t0 = std::chrono::steady_clock::now();
      m.last = m.run();
      m.total_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
  }

  const double base = modes[0].total_ms / config.runs;
  const double tree_bytes = static_cast<double>(modes[2].last.counters.peak_scratch_bytes);
  Report report("latency");
  for (const auto& m : modes) {
    const double mean = m.total_ms / config.runs;
    const auto bytes = m.last.counters.peak_scratch_bytes;
    double candidates = 1.0;
    if (!m.last.trace.empty() && m.name.rfind("caw", 0) == 0) {
      double sum = 0.0;
      for (const auto& t : m.last.trace) sum += static_cast<double>(t.candidates.size());
      candidates = sum / static_cast<double>(m.last.trace.size());
    }
    report.add_row({m.name, mean, mean / base, static_cast<std::int64_t>(bytes),
                    tree_bytes > 0 ? static_cast<double>(bytes) / tree_bytes : 0.0, candidates,
                    static_cast<std::int64_t>(config.runs),
                    std::string("instrumented peak transient bytes; process RSS is not meaningful at toy scale")});
  }
  report.meta = {{"backend", model.backend_name()},
                 {"prompt_length", config.prompt_length},
                 {"new_tokens", config.new_tokens},
                 {"scheme", config.scheme}};
  report.validate();
  return report;
}

}  // namespace capwm
