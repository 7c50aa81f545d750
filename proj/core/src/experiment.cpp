#include "capwm/harness/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>

#include "capwm/capacity/labels.hpp"
#include "capwm/detect/detect.hpp"
#include "capwm/prf.hpp"
#include "capwm/toylm/ngram.hpp"
#include "capwm/toylm/transformer.hpp"

namespace capwm {

namespace {

constexpr std::uint64_t kModelSalt = 0xA11CE5EEDULL;
constexpr std::uint64_t kLabelSalt = 0xB0B5EEDULL;
constexpr std::uint64_t kAttackSalt = 0xA77AC4ULL;

template <typename E, std::size_t N>
E parse_enum(std::string_view name, const std::array<E, N>& values, const char* what) {
  for (E v : values) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(name) + "'");
}

std::uint64_t repetition_seed(std::uint64_t master, int repetition) {
  return mix64(master + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(repetition + 1));
}

bool dominates(double auroc_a, double acc_a, double auroc_b, double acc_b) {
  return auroc_a >= auroc_b && acc_a >= acc_b && (auroc_a > auroc_b || acc_a > acc_b);
}

}  // namespace

std::string_view to_string(Method method) {
  switch (method) {
    case Method::kPlain: return "plain";
    case Method::kEntropy: return "entropy";
    case Method::kCaw: return "caw";
  }
  return "plain";
}

Method method_from_string(std::string_view name) {
  return parse_enum(name, std::array{Method::kPlain, Method::kEntropy, Method::kCaw}, "method");
}

std::string_view to_string(Tier tier) {
  switch (tier) {
    case Tier::kSoft: return "soft";
    case Tier::kMid: return "mid";
    case Tier::kHard: return "hard";
  }
  return "hard";
}

Tier tier_from_string(std::string_view name) {
  return parse_enum(name, std::array{Tier::kSoft, Tier::kMid, Tier::kHard}, "tier");
}

std::string_view to_string(CapacityOrientation o) {
  return o == CapacityOrientation::kCriticality ? "criticality" : "tolerance";
}

CapacityOrientation orientation_from_string(std::string_view name) {
  return parse_enum(name, std::array{CapacityOrientation::kCriticality, CapacityOrientation::kTolerance},
                    "capacity orientation");
}

SchemeConfig tiered_scheme(const SchemeConfig& base, Tier tier, const TierTable& table) {
  SchemeConfig s = base;
  const auto i = static_cast<std::size_t>(tier);
  if (s.kind == SchemeKind::kExp) {
    s.top_k = table.top_k[i];
  } else {
    s.delta = table.delta[i];
  }
  return s;
}

double OrientedCapacity::score(const StateWindow& window) const {
  const double c = evaluate_capacity(params_, window);
  return orientation_ == CapacityOrientation::kCriticality ? 1.0 - c : c;
}

void ExperimentConfig::validate() const {
  if (backend != "ngram" && backend != "transformer") throw ConfigError("backend must be 'ngram' or 'transformer'");
  if (!model_path.empty() && !std::filesystem::exists(model_path)) {
    throw ConfigError("model file not found: " + model_path.string());
  }
  if (!evaluator_path.empty() && !std::filesystem::exists(evaluator_path)) {
    throw ConfigError("evaluator file not found: " + evaluator_path.string());
  }
  task.validate();
  if (train_documents < 1) throw ConfigError("train_documents must be >= 1");
  if (schemes.empty() || methods.empty() || tiers.empty()) throw ConfigError("schemes, methods and tiers must be non-empty");
  for (const auto& s : schemes) {
    for (Tier t : tiers) tiered_scheme(s, t, tier_table).validate(task.vocab_size);
  }
  for (double th : thetas) {
    if (!(th > 0.0 && th < 1.0)) throw ConfigError("theta must lie in (0, 1)");
  }
  if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
  for (double e : entropy_thresholds) {
    if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("entropy thresholds must lie in [0, 1]");
  }
  if (label_prompts < 1) throw ConfigError("label_prompts must be >= 1");
  train.validate();
  if (n < 1) throw ConfigError("n must be >= 1");
  if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  for (const auto& a : attacks) a.validate();
  if (key_hex) WatermarkKey::from_hex(*key_hex);
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    c.backend = j.value("backend", c.backend);
    c.model_path = j.value("model", std::string());
    if (j.contains("task")) {
      const auto& t = j.at("task");
      c.task.vocab_size = t.value("vocab_size", c.task.vocab_size);
      c.task.modulus = t.value("modulus", c.task.modulus);
      c.task.filler_length = t.value("filler_length", c.task.filler_length);
      c.task.filler_class = t.value("filler_class", c.task.filler_class);
      c.task.style_length = t.value("style_length", c.task.style_length);
      c.task.style_class = t.value("style_class", c.task.style_class);
      c.task.style_noise = t.value("style_noise", c.task.style_noise);
      c.task.answer_noise = t.value("answer_noise", c.task.answer_noise);
      c.task.shots = t.value("shots", c.task.shots);
    }
    c.train_documents = j.value("train_documents", c.train_documents);
    c.ngram_order = j.value("ngram_order", c.ngram_order);
    c.ngram_alpha = j.value("ngram_alpha", c.ngram_alpha);
    if (j.contains("schemes")) c.schemes = j.at("schemes").get<std::vector<SchemeConfig>>();
    if (j.contains("methods")) {
      c.methods.clear();
      for (const auto& m : j.at("methods")) c.methods.push_back(method_from_string(m.get<std::string>()));
    }
    if (j.contains("tiers")) {
      c.tiers.clear();
      for (const auto& t : j.at("tiers")) c.tiers.push_back(tier_from_string(t.get<std::string>()));
    }
    if (j.contains("tier_table")) {
      const auto& t = j.at("tier_table");
      if (t.contains("delta")) c.tier_table.delta = t.at("delta").get<std::array<double, 3>>();
      if (t.contains("top_k")) c.tier_table.top_k = t.at("top_k").get<std::array<int, 3>>();
    }
    if (j.contains("thetas")) c.thetas = j.at("thetas").get<std::vector<double>>();
    c.beta = j.value("beta", c.beta);
    if (j.contains("entropy_thresholds")) c.entropy_thresholds = j.at("entropy_thresholds").get<std::vector<double>>();
    c.evaluator_path = j.value("evaluator", std::string());
    if (j.contains("capacity_orientation")) {
      c.orientation = orientation_from_string(j.at("capacity_orientation").get<std::string>());
    }
    c.label_prompts = j.value("label_prompts", c.label_prompts);
    if (j.contains("train")) {
      const auto& t = j.at("train");
      c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
      c.train.epochs = t.value("epochs", c.train.epochs);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.seed = t.value("seed", c.train.seed);
      c.train.hidden1 = t.value("hidden1", c.train.hidden1);
      c.train.hidden2 = t.value("hidden2", c.train.hidden2);
      c.train.validation_fraction = t.value("validation_fraction", c.train.validation_fraction);
    }
    c.n = j.value("n", c.n);
    c.repetitions = j.value("repetitions", c.repetitions);
    c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
    if (j.contains("attacks")) {
      for (const auto& a : j.at("attacks")) {
        AttackConfig ac;
        ac.kind = attack_kind_from_string(a.at("kind").get<std::string>());
        ac.p = a.value("p", ac.p);
        ac.seed = a.value("seed", ac.seed);
        ac.topk = a.value("topk", ac.topk);
        c.attacks.push_back(ac);
      }
    }
    if (j.contains("key")) c.key_hex = j.at("key").get<std::string>();
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  std::vector<std::string> methods, tiers;
  for (Method m : c.methods) methods.emplace_back(to_string(m));
  for (Tier t : c.tiers) tiers.emplace_back(to_string(t));
  nlohmann::json attacks = nlohmann::json::array();
  for (const auto& a : c.attacks) {
    attacks.push_back({{"kind", to_string(a.kind)}, {"p", a.p}, {"seed", a.seed}, {"topk", a.topk}});
  }
  j = {{"backend", c.backend},
       {"model", c.model_path.string()},
       {"task",
        {{"vocab_size", c.task.vocab_size},
         {"modulus", c.task.modulus},
         {"filler_length", c.task.filler_length},
         {"filler_class", c.task.filler_class},
         {"style_length", c.task.style_length},
         {"style_class", c.task.style_class},
         {"style_noise", c.task.style_noise},
         {"answer_noise", c.task.answer_noise},
         {"shots", c.task.shots}}},
       {"train_documents", c.train_documents},
       {"ngram_order", c.ngram_order},
       {"ngram_alpha", c.ngram_alpha},
       {"schemes", c.schemes},
       {"methods", methods},
       {"tiers", tiers},
       {"tier_table", {{"delta", c.tier_table.delta}, {"top_k", c.tier_table.top_k}}},
       {"thetas", c.thetas},
       {"beta", c.beta},
       {"entropy_thresholds", c.entropy_thresholds},
       {"evaluator", c.evaluator_path.string()},
       {"capacity_orientation", to_string(c.orientation)},
       {"label_prompts", c.label_prompts},
       {"train",
        {{"learning_rate", c.train.learning_rate},
         {"epochs", c.train.epochs},
         {"batch_size", c.train.batch_size},
         {"seed", c.train.seed},
         {"hidden1", c.train.hidden1},
         {"hidden2", c.train.hidden2},
         {"validation_fraction", c.train.validation_fraction}}},
       {"n", c.n},
       {"repetitions", c.repetitions},
       {"max_new_tokens", c.max_new_tokens},
       {"attacks", attacks},
       {"seed", c.seed}};
  if (c.key_hex) j["key"] = *c.key_hex;
}

std::shared_ptr<const LanguageModel> load_model(const std::string& backend, const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("model file not found: " + path.string());
  if (backend == "ngram") return std::make_shared<NGramModel>(load_ngram(path));
  if (backend == "transformer") {
    return std::make_shared<TransformerModel>(std::make_shared<const TransformerParams>(load_transformer(path)));
  }
  throw ConfigError("backend must be 'ngram' or 'transformer'");
}

std::shared_ptr<const LanguageModel> build_model(const ExperimentConfig& config) {
  if (!config.model_path.empty()) return load_model(config.backend, config.model_path);
  const SyntheticTask task(config.task);
  if (config.backend == "ngram") {
    return std::make_shared<NGramModel>(train_task_model(task, config.train_documents, mix64(config.seed ^ kModelSalt),
                                                         config.ngram_order, config.ngram_alpha));
  }
  TransformerConfig tc;
  tc.vocab_size = task.vocab_size();
  tc.seed = mix64(config.seed ^ kModelSalt);
  return std::make_shared<TransformerModel>(tc);
}

ExperimentContext prepare_context(const ExperimentConfig& config) {
  config.validate();
  ExperimentContext ctx{SyntheticTask(config.task), build_model(config), EvaluatorParams::zeros(WindowShape{}), 0, 0};
  if (ctx.model->vocab_size() != ctx.task.vocab_size()) {
    throw DataError("model vocabulary (" + std::to_string(ctx.model->vocab_size()) +
                    ") does not match the task vocabulary (" + std::to_string(ctx.task.vocab_size()) + ")");
  }

  if (!config.evaluator_path.empty()) {
    ctx.evaluator = load_evaluator(config.evaluator_path);
    return ctx;
  }
  const WindowShape shape{default_top_m(ctx.task.vocab_size()), 1, 1};
  const auto items = gen_corpus(ctx.task, config.label_prompts, mix64(config.seed ^ kLabelSalt));
  std::vector<LabelingInput> inputs;
  const GenerationLimits limits{config.max_new_tokens, task_tokens::kEos, std::nullopt};
  for (const auto& item : items) {
    inputs.push_back({item.prompt, generate_greedy(*ctx.model, item.prompt, limits).tokens});
  }
  LabelingOptions options;
  options.shape = shape;
  options.stop_token = task_tokens::kEos;
  const auto& task = ctx.task;
  const auto labels = gen_labels(inputs, *ctx.model,
                                 [&task](std::span<const TokenId> c) { return task.extract(c); }, options);
  ctx.label_count = labels.samples.size();
  ctx.label_skipped = labels.skipped;
  ctx.evaluator = train_evaluator(labels.samples, shape, config.train).params;
  return ctx;
}

RepetitionData make_repetition(const ExperimentContext& ctx, const ExperimentConfig& config, int repetition) {
  const std::uint64_t seed = repetition_seed(config.seed, repetition);
  RepetitionData rep{seed, config.key_hex ? WatermarkKey::from_hex(*config.key_hex) : WatermarkKey::from_seed(seed),
                     gen_corpus(ctx.task, config.n, seed), {}, 0};
  const GenerationLimits limits{config.max_new_tokens, task_tokens::kEos, std::nullopt};
  for (const auto& item : rep.items) {
    auto out = generate_greedy(*ctx.model, item.prompt, limits);
    rep.clean_rows += out.counters.rows_computed;
    rep.clean.push_back(std::move(out.tokens));
  }
  return rep;
}

GenerationOutput generate_condition(const ExperimentContext& ctx, const ExperimentConfig& config,
                                   const Condition& condition, std::span<const TokenId> prompt,
                                   const WatermarkKey& key) {
  const GenerationLimits limits{config.max_new_tokens, task_tokens::kEos, std::nullopt};
  switch (condition.method) {
    case Method::kPlain: return generate_wm_plain(*ctx.model, prompt, key, condition.scheme, limits);
    case Method::kEntropy:
      return generate_wm_entropy_gated(*ctx.model, prompt, key, condition.scheme, condition.parameter, limits);
    case Method::kCaw: {
      CAWConfig caw;
      caw.theta = condition.parameter;
      caw.beta = config.beta;
      caw.scheme = condition.scheme;
      caw.max_new_tokens = config.max_new_tokens;
      caw.stop_token = task_tokens::kEos;
      const OrientedCapacity capacity(ctx.evaluator, config.orientation);
      return generate_wm(*ctx.model, prompt, key, caw, capacity);
    }
  }
  throw ConfigError("unknown method");
}

double completion_z(std::span<const TokenId> text, const WatermarkKey& key, const SchemeConfig& scheme,
                    int vocab_size) {
  if (text.size() < static_cast<std::size_t>(scheme.hash_window) + 1) return 0.0;
  return detect_score(text, key, scheme, vocab_size).z;
}

std::vector<Condition> expand_conditions(const ExperimentConfig& config) {
  std::vector<Condition> out;
  for (const auto& base : config.schemes) {
    for (Method m : config.methods) {
      for (Tier t : config.tiers) {
        const SchemeConfig s = tiered_scheme(base, t, config.tier_table);
        if (m == Method::kPlain) {
          out.push_back({m, s, t, 0.0});
        } else {
          for (double p : m == Method::kCaw ? config.thetas : config.entropy_thresholds) out.push_back({m, s, t, p});
        }
      }
    }
  }
  return out;
}

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double spread_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

std::vector<ConditionSummary> evaluate_conditions(const ExperimentContext& ctx, const ExperimentConfig& config,
                                                  std::span<const Condition> conditions) {
  std::vector<ConditionSummary> out;
  for (const auto& c : conditions) out.push_back({c, {}, {}, {}, {}, {}, {}, 0.0, 0});
  const int V = ctx.model->vocab_size();
  std::vector<std::size_t> rows(conditions.size(), 0);
  std::size_t clean_rows = 0;
  for (int r = 0; r < config.repetitions; ++r) {
    const RepetitionData rep = make_repetition(ctx, config, r);
    clean_rows += rep.clean_rows;
    for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
      const Condition& cond = conditions[ci];
      ScorePair scores;
      std::size_t correct = 0, marked = 0, positions = 0;
      for (std::size_t i = 0; i < rep.items.size(); ++i) {
        const auto gen = generate_condition(ctx, config, cond, rep.items[i].prompt, rep.key);
        rows[ci] += gen.counters.rows_computed;
        out[ci].peak_scratch_bytes = std::max(out[ci].peak_scratch_bytes, gen.counters.peak_scratch_bytes);
        for (const auto& t : gen.trace) marked += t.watermarked() ? 1 : 0;
        positions += gen.trace.size();
        const auto answer = ctx.task.extract(gen.tokens);
        if (answer && *answer == rep.items[i].answer) ++correct;
        scores.positives.push_back(completion_z(gen.tokens, rep.key, cond.scheme, V));
        scores.negatives.push_back(completion_z(rep.clean[i], rep.key, cond.scheme, V));
      }
      const double n = static_cast<double>(rep.items.size());
      out[ci].accuracy.push_back(static_cast<double>(correct) / n);
      out[ci].auroc.push_back(roc_auc(scores));
      out[ci].f1.push_back(best_f1(scores).f1);
      out[ci].mean_z.push_back(mean_of(scores.positives));
      out[ci].mean_z_clean.push_back(mean_of(scores.negatives));
      out[ci].watermarked_fraction.push_back(positions ? static_cast<double>(marked) / static_cast<double>(positions)
                                                       : 0.0);
    }
  }
  for (std::size_t ci = 0; ci < out.size(); ++ci) {
    out[ci].compute_ratio = clean_rows ? static_cast<double>(rows[ci]) / static_cast<double>(clean_rows) : 0.0;
  }
  return out;
}

Report run_experiment(const ExperimentConfig& config) { return run_experiment(prepare_context(config), config); }

Report run_experiment(const ExperimentContext& ctx, const ExperimentConfig& config) {
  const auto conditions = expand_conditions(config);
  const auto summaries = evaluate_conditions(ctx, config, conditions);
  Report report("experiment");
  for (const auto& s : summaries) {
    report.add_row({std::string(to_string(s.condition.method)), std::string(to_string(s.condition.scheme.kind)),
                    std::string(to_string(s.condition.tier)), s.condition.parameter,
                    static_cast<std::int64_t>(config.n), static_cast<std::int64_t>(config.repetitions),
                    mean_of(s.accuracy), spread_of(s.accuracy), mean_of(s.auroc), spread_of(s.auroc), mean_of(s.f1),
                    mean_of(s.mean_z), mean_of(s.mean_z_clean), mean_of(s.watermarked_fraction), s.compute_ratio,
                    "peak scratch " + std::to_string(s.peak_scratch_bytes) + " bytes",
                    static_cast<std::int64_t>(config.seed)});
  }
  nlohmann::json cfg;
  to_json(cfg, config);
  report.meta = {{"config", cfg}, {"labels", ctx.label_count}, {"labels_skipped", ctx.label_skipped}};
  report.validate();
  return report;
}

Report sweep_pareto(const ExperimentContext& ctx, const ExperimentConfig& config, std::span<const Tier> tiers) {
  ExperimentConfig swept = config;
  swept.tiers.assign(tiers.begin(), tiers.end());
  const auto conditions = expand_conditions(swept);
  const auto summaries = evaluate_conditions(ctx, swept, conditions);
  Report report("pareto");
  for (const auto& s : summaries) {
    const double au = mean_of(s.auroc);
    const double acc = mean_of(s.accuracy);
    bool dominated = false;
    if (s.condition.method != Method::kPlain) {
      for (const auto& other : summaries) {
        if (other.condition.method == Method::kPlain && other.condition.scheme.kind == s.condition.scheme.kind &&
            dominates(mean_of(other.auroc), mean_of(other.accuracy), au, acc)) {
          dominated = true;
        }
      }
    }
    report.add_row({std::string(to_string(s.condition.method)), std::string(to_string(s.condition.scheme.kind)),
                    std::string(to_string(s.condition.tier)), s.condition.parameter, au, spread_of(s.auroc), acc,
                    spread_of(s.accuracy), dominated, static_cast<std::int64_t>(config.seed)});
  }
  nlohmann::json cfg;
  to_json(cfg, swept);
  report.meta = {{"config", cfg}};
  report.validate();
  return report;
}

Report robustness_suite(const ExperimentContext& ctx, const ExperimentConfig& config,
                        std::span<const AttackConfig> attacks) {
  for (const auto& a : attacks) a.validate();
  const int V = ctx.model->vocab_size();
  const SynonymTable table = ctx.task.synonyms();
  const Tier tier = config.tiers.back();

  struct Cell {
    std::vector<double> clean, attacked, loss;
  };
  std::vector<Condition> conditions;
  for (const auto& base : config.schemes) {
    const SchemeConfig s = tiered_scheme(base, tier, config.tier_table);
    conditions.push_back({Method::kPlain, s, tier, 0.0});
    conditions.push_back({Method::kCaw, s, tier, config.thetas.front()});
  }
  std::vector<std::vector<Cell>> cells(conditions.size(), std::vector<Cell>(attacks.size()));

  for (int r = 0; r < config.repetitions; ++r) {
    const RepetitionData rep = make_repetition(ctx, config, r);
    for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
      const Condition& cond = conditions[ci];
      std::vector<TokenSeq> marked;
      for (const auto& item : rep.items) {
        marked.push_back(generate_condition(ctx, config, cond, item.prompt, rep.key).tokens);
      }
      ScorePair clean;
      for (std::size_t i = 0; i < marked.size(); ++i) {
        clean.positives.push_back(completion_z(marked[i], rep.key, cond.scheme, V));
        clean.negatives.push_back(completion_z(rep.clean[i], rep.key, cond.scheme, V));
      }
      const double auroc_clean = roc_auc(clean);
      for (std::size_t ai = 0; ai < attacks.size(); ++ai) {
        ScorePair hit;
        for (std::size_t i = 0; i < marked.size(); ++i) {
          AttackConfig a = attacks[ai];
          const std::uint64_t s = mix64(rep.seed ^ kAttackSalt ^ (a.seed + 0x100000000ULL * (i + 1)));
          a.seed = s;
          const auto& prompt = rep.items[i].prompt;
          const auto wm = apply_attack(marked[i], a, table, ctx.model.get(), prompt);
          a.seed = mix64(s);
          const auto cl = apply_attack(rep.clean[i], a, table, ctx.model.get(), prompt);
          hit.positives.push_back(completion_z(wm, rep.key, cond.scheme, V));
          hit.negatives.push_back(completion_z(cl, rep.key, cond.scheme, V));
        }
        const double auroc_hit = roc_auc(hit);
        cells[ci][ai].clean.push_back(auroc_clean);
        cells[ci][ai].attacked.push_back(auroc_hit);
        cells[ci][ai].loss.push_back(auroc_clean - auroc_hit);
      }
    }
  }

  Report report("robustness");
  for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
    for (std::size_t ai = 0; ai < attacks.size(); ++ai) {
      const Cell& c = cells[ci][ai];
      report.add_row({std::string(to_string(conditions[ci].scheme.kind)),
                      std::string(to_string(conditions[ci].method)), std::string(to_string(attacks[ai].kind)),
                      attacks[ai].p, mean_of(c.clean), mean_of(c.attacked), mean_of(c.loss), spread_of(c.loss),
                      static_cast<std::int64_t>(config.repetitions), static_cast<std::int64_t>(config.seed)});
    }
  }
  nlohmann::json cfg;
  to_json(cfg, config);
  report.meta = {{"config", cfg}, {"tier", to_string(tier)}};
  report.validate();
  return report;
}

double perplexity(const LanguageModel& model, std::span<const TokenId> text, std::span<const TokenId> context) {
  const std::size_t first = context.empty() ? 1 : 0;
  if (text.size() < first + 1 || text.size() < 2) throw UsageError("perplexity needs at least two tokens");
  auto session = model.open_session();
  LogitsRow logits = context.empty() ? session->extend(text.first(1)) : session->extend(context);
  double nll = 0.0;
  for (std::size_t i = first; i < text.size(); ++i) {
    nll -= log_softmax(logits)[static_cast<std::size_t>(text[i])];
    if (i + 1 < text.size()) logits = session->extend(text.subspan(i, 1));
  }
  return std::exp(nll / static_cast<double>(text.size() - first));
}

double rank_test_p(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw UsageError("rank test needs two non-empty samples");
  std::vector<std::pair<double, int>> all;
  for (double x : a) all.emplace_back(x, 0);
  for (double x : b) all.emplace_back(x, 1);
  std::sort(all.begin(), all.end(), [](const auto& l, const auto& r) { return l.first < r.first; });
  const double n1 = static_cast<double>(a.size()), n2 = static_cast<double>(b.size()), n = n1 + n2;
  double rank_sum = 0.0, tie_term = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].second == 0) rank_sum += avg;
    }
    i = j;
  }
  const double u = rank_sum - n1 * (n1 + 1) / 2;
  const double mu = n1 * n2 / 2;
  const double var = n1 * n2 / 12 * ((n + 1) - tie_term / (n * (n - 1)));
  if (var <= 0) return 1.0;
  const double z = (std::abs(u - mu) - 0.5) / std::sqrt(var);
  return std::min(1.0, std::erfc(std::max(0.0, z) / std::sqrt(2.0)));
}

Report perplexity_analysis(const ExperimentContext& ctx, const ExperimentConfig& config) {
  const Tier tier = config.tiers.back();
  const SchemeConfig scheme = tiered_scheme(config.schemes.front(), tier, config.tier_table);
  const std::vector<Condition> conditions{{Method::kPlain, scheme, tier, 0.0},
                                          {Method::kCaw, scheme, tier, config.thetas.front()}};
  const RepetitionData rep = make_repetition(ctx, config, 0);

  auto score = [&](const std::vector<TokenSeq>& completions, std::vector<double>& ppl) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < completions.size(); ++i) {
      ppl.push_back(perplexity(*ctx.model, completions[i], rep.items[i].prompt));
      const auto a = ctx.task.extract(completions[i]);
      if (a && *a == rep.items[i].answer) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(completions.size());
  };
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  };

  Report report("perplexity");
  std::vector<double> base_ppl;
  const double base_acc = score(rep.clean, base_ppl);
  report.add_row({std::string("unwatermarked"), static_cast<std::int64_t>(rep.items.size()), median(base_ppl),
                  mean_of(base_ppl), base_acc, 1.0, false, static_cast<std::int64_t>(config.seed)});
  nlohmann::json findings = nlohmann::json::array();
  for (const auto& cond : conditions) {
    std::vector<TokenSeq> completions;
    for (const auto& item : rep.items) {
      completions.push_back(generate_condition(ctx, config, cond, item.prompt, rep.key).tokens);
    }
    std::vector<double> ppl;
    const double acc = score(completions, ppl);
    const double p = rank_test_p(ppl, base_ppl);
    const bool dissociation = std::abs(acc - base_acc) > 0.1 && p > 0.05;
    const std::string name = std::string(to_string(cond.method)) + "_" + std::string(to_string(scheme.kind));
    report.add_row({name, static_cast<std::int64_t>(completions.size()), median(ppl), mean_of(ppl), acc, p,
                    dissociation, static_cast<std::int64_t>(config.seed)});
    findings.push_back({{"condition", name},
                        {"accuracy_gap", acc - base_acc},
                        {"rank_test_p", p},
                        {"dissociation", dissociation}});
  }
  report.meta = {{"tier", to_string(tier)}, {"findings", findings}};
  report.validate();
  return report;
}

}  // namespace capwm
