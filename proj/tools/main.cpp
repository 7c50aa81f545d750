// capwm command-line tool.
//
//   capwm [--config c.json] [--seed N] [--out DIR] [--backend B] [--model P] [--key HEX] <command> ...
//
// Exit codes: 0 success, 2 configuration error, 3 data error.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>

#include "capwm/adaptive/adaptive.hpp"
#include "capwm/attacks/attacks.hpp"
#include "capwm/detect/detect.hpp"
#include "capwm/harness/experiment.hpp"
#include "capwm/harness/latency.hpp"
#include "capwm/harness/report.hpp"
#include "capwm/harness/task.hpp"
#include "capwm/toylm/ngram.hpp"
#include "capwm/toylm/transformer.hpp"

namespace fs = std::filesystem;
using namespace capwm;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<std::string> backend;
  std::optional<std::string> model;
  std::optional<std::string> key;
};

// Scheme overrides shared by generate, detect and bench.
struct SchemeFlags {
  std::optional<std::string> kind;
  std::optional<double> delta;
  std::optional<double> gamma;
  std::optional<int> top_k;
  std::optional<int> hash_window;
  std::optional<std::string> tier;

  void add(CLI::App* cmd) {
    cmd->add_option("--scheme", kind, "kgw, unigram or exp")->check(CLI::IsMember({"kgw", "unigram", "exp"}));
    cmd->add_option("--delta", delta, "logit bias (kgw, unigram)");
    cmd->add_option("--gamma", gamma, "green fraction");
    cmd->add_option("--top-k", top_k, "candidate pool (exp)");
    cmd->add_option("--hash-window", hash_window, "context tokens hashed into the seed");
    cmd->add_option("--tier", tier, "soft, mid or hard; applied before explicit overrides")
        ->check(CLI::IsMember({"soft", "mid", "hard"}));
  }

  SchemeConfig resolve(const ExperimentConfig& config) const {
    SchemeConfig s = config.schemes.front();
    if (kind) {
      const SchemeKind k = scheme_kind_from_string(*kind);
      if (k != s.kind) {
        s = k == SchemeKind::kExp ? SchemeConfig::exp(4) : k == SchemeKind::kUnigram ? SchemeConfig::unigram(2.0)
                                                                                      : SchemeConfig::kgw(2.0);
      }
    }
    s = tiered_scheme(s, tier ? tier_from_string(*tier) : config.tiers.back(), config.tier_table);
    if (delta) s.delta = *delta;
    if (gamma) s.gamma = *gamma;
    if (top_k) s.top_k = *top_k;
    if (hash_window) s.hash_window = *hash_window;
    s.validate(config.task.vocab_size);
    return s;
  }
};

ExperimentConfig load_config(const Globals& g) {
  nlohmann::json j = nlohmann::json::object();
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) throw ConfigError("cannot open config: " + g.config_path);
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  if (g.seed) j["seed"] = *g.seed;
  if (g.backend) j["backend"] = *g.backend;
  if (g.model) j["model"] = *g.model;
  if (g.key) j["key"] = *g.key;
  return experiment_config_from_json(j);
}

WatermarkKey resolve_key(const ExperimentConfig& config) {
  return config.key_hex ? WatermarkKey::from_hex(*config.key_hex) : WatermarkKey::from_seed(config.seed);
}

TokenSeq parse_tokens(const std::string& csv) {
  TokenSeq out;
  std::stringstream ss(csv);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      out.push_back(static_cast<TokenId>(std::stoi(part)));
    } catch (const std::exception&) {
      throw ConfigError("bad token id: '" + part + "'");
    }
  }
  return out;
}

// One JSON object per non-empty line.
std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

void check_tokens(std::span<const TokenId> tokens, int vocab_size) {
  for (TokenId t : tokens) {
    if (t < 0 || t >= vocab_size) throw DataError("token " + std::to_string(t) + " outside the vocabulary");
  }
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

void print_report(const Report& report, const fs::path& dir, const std::string& stem) {
  write_report(report, dir, stem);
  std::cout << to_csv(report);
  std::cerr << "wrote " << (dir / (stem + ".csv")).string() << " and .json\n";
}

int cmd_gen_corpus(const Globals& g, int n, bool save_model) {
  const auto config = load_config(g);
  const SyntheticTask task(config.task);
  const auto corpus = gen_corpus(task, n, config.seed);
  fs::create_directories(g.out);
  save_corpus(corpus, fs::path(g.out) / "corpus.jsonl");
  std::cerr << "wrote " << corpus.size() << " items to " << (fs::path(g.out) / "corpus.jsonl").string() << "\n";
  if (save_model) {
    const auto model = build_model(config);
    const fs::path path = fs::path(g.out) / "model.json";
    if (const auto* ng = dynamic_cast<const NGramModel*>(model.get())) {
      save_ngram(ng->params(), path);
    } else if (const auto* tf = dynamic_cast<const TransformerModel*>(model.get())) {
      save_transformer(tf->params(), path);
    }
    std::cerr << "wrote " << path.string() << "\n";
  }
  return 0;
}

int cmd_train_evaluator(const Globals& g) {
  auto config = load_config(g);
  config.evaluator_path.clear();
  const auto ctx = prepare_context(config);
  const fs::path path = fs::path(g.out) / "evaluator.json";
  fs::create_directories(g.out);
  save_evaluator(ctx.evaluator, path);
  std::cout << nlohmann::json{{"evaluator", path.string()},
                              {"labels", ctx.label_count},
                              {"skipped", ctx.label_skipped}}
                   .dump()
            << "\n";
  return 0;
}

struct GenerateFlags {
  std::string method = "caw";
  std::string corpus;
  std::string prompt;
  int n = 10;
  std::optional<double> theta;
  std::optional<double> entropy_threshold;
  std::optional<int> max_new_tokens;
  std::optional<std::uint64_t> sample_seed;
  std::string branch = "tree";
  bool traces = false;
  SchemeFlags scheme;
};

int cmd_generate(const Globals& g, const GenerateFlags& f) {
  auto config = load_config(g);
  if (f.max_new_tokens) config.max_new_tokens = *f.max_new_tokens;
  config.validate();
  const SchemeConfig scheme = f.scheme.resolve(config);
  const WatermarkKey key = resolve_key(config);

  std::vector<TaskItem> items;
  if (!f.prompt.empty()) {
    items.push_back({parse_tokens(f.prompt), {}, -1});
  } else if (!f.corpus.empty()) {
    items = load_corpus(f.corpus);
  } else {
    if (f.n < 1) throw ConfigError("--n must be >= 1");
    items = gen_corpus(SyntheticTask(config.task), f.n, config.seed);
  }

  ExperimentContext ctx{SyntheticTask(config.task), nullptr, EvaluatorParams::zeros(WindowShape{}), 0, 0};
  if (f.method == "caw") {
    ctx = prepare_context(config);
  } else {
    ctx.model = build_model(config);
  }
  const LanguageModel& model = *ctx.model;
  for (const auto& item : items) check_tokens(item.prompt, model.vocab_size());

  const BranchMode mode = f.branch == "sequential" ? BranchMode::kSequential
                          : f.branch == "batched"  ? BranchMode::kBatched
                                                   : BranchMode::kTree;
  const GenerationLimits limits{config.max_new_tokens, task_tokens::kEos, f.sample_seed};
  const fs::path dir(g.out);
  auto out = open_out(dir / "generations.jsonl");
  std::size_t correct = 0, scored = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& item = items[i];
    GenerationOutput gen;
    if (f.method == "greedy") {
      gen = generate_greedy(model, item.prompt, limits);
    } else if (f.method == "plain") {
      gen = generate_wm_plain(model, item.prompt, key, scheme, limits);
    } else if (f.method == "entropy") {
      gen = generate_wm_entropy_gated(model, item.prompt, key, scheme,
                                      f.entropy_threshold.value_or(config.entropy_thresholds.front()), limits);
    } else {
      CAWConfig caw;
      caw.theta = f.theta.value_or(config.thetas.front());
      caw.beta = config.beta;
      caw.scheme = scheme;
      caw.max_new_tokens = config.max_new_tokens;
      caw.stop_token = task_tokens::kEos;
      gen = generate_wm(model, item.prompt, key, caw, OrientedCapacity(ctx.evaluator, config.orientation), mode);
    }
    const auto extracted = ctx.task.extract(gen.tokens);
    nlohmann::json row{{"index", i}, {"prompt", item.prompt}, {"tokens", gen.tokens}};
    if (item.answer >= 0) {
      row["answer"] = item.answer;
      ++scored;
      if (extracted && *extracted == item.answer) ++correct;
    }
    row["extracted"] = extracted ? nlohmann::json(*extracted) : nlohmann::json(nullptr);
    out << row.dump() << "\n";
    if (f.traces && !gen.trace.empty()) {
      fs::create_directories(dir / "traces");
      save_trace(gen.trace, dir / "traces" / (std::to_string(i) + ".jsonl"));
    }
  }
  nlohmann::json summary{{"method", f.method}, {"scheme", scheme}, {"count", items.size()},
                         {"key", key.to_hex()}, {"output", (dir / "generations.jsonl").string()}};
  if (scored > 0) summary["accuracy"] = static_cast<double>(correct) / static_cast<double>(scored);
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_detect(const Globals& g, const std::string& input, const std::string& tokens, double threshold,
               const SchemeFlags& flags) {
  const auto config = load_config(g);
  const SchemeConfig scheme = flags.resolve(config);
  const WatermarkKey key = resolve_key(config);
  const int vocab = config.task.vocab_size;

  std::vector<TokenSeq> texts;
  if (!tokens.empty()) {
    texts.push_back(parse_tokens(tokens));
  } else if (!input.empty()) {
    for (const auto& row : read_jsonl(input)) {
      if (!row.contains("tokens")) throw DataError("input rows need a 'tokens' array");
      texts.push_back(row.at("tokens").get<TokenSeq>());
    }
  } else {
    throw ConfigError("detect needs --input or --tokens");
  }

  std::optional<std::ofstream> out;
  if (!input.empty()) out = open_out(fs::path(g.out) / "detections.jsonl");
  for (const auto& text : texts) {
    check_tokens(text, vocab);
    nlohmann::json j = detect(text, key, scheme, vocab, threshold);
    std::cout << j.dump() << "\n";
    if (out) *out << j.dump() << "\n";
  }
  return 0;
}

int cmd_attack(const Globals& g, const std::string& input, const AttackConfig& attack) {
  const auto config = load_config(g);
  attack.validate();
  const SyntheticTask task(config.task);
  const SynonymTable table = task.synonyms();
  std::shared_ptr<const LanguageModel> model;
  if (attack.kind == AttackKind::kWordSubContext) model = build_model(config);

  const auto rows = read_jsonl(input);
  const fs::path path = fs::path(g.out) / "attacked.jsonl";
  auto out = open_out(path);
  std::uint64_t i = 0;
  for (auto row : rows) {
    if (!row.contains("tokens")) throw DataError("input rows need a 'tokens' array");
    const auto text = row.at("tokens").get<TokenSeq>();
    const auto lead = row.value("prompt", TokenSeq{});
    check_tokens(text, table.vocab_size());
    check_tokens(lead, table.vocab_size());
    AttackConfig per_text = attack;
    per_text.seed = mix64(attack.seed ^ mix64(i++));
    row["original"] = text;
    row["tokens"] = apply_attack(text, per_text, table, model.get(), lead);
    row["attack"] = {{"kind", to_string(attack.kind)}, {"p", attack.p}, {"seed", attack.seed}};
    out << row.dump() << "\n";
  }
  std::cout << nlohmann::json{{"attacked", rows.size()}, {"output", path.string()}}.dump() << "\n";
  return 0;
}

int cmd_experiment(const Globals& g, bool with_perplexity) {
  const auto config = load_config(g);
  const auto ctx = prepare_context(config);
  print_report(run_experiment(ctx, config), g.out, "experiment");
  if (with_perplexity) print_report(perplexity_analysis(ctx, config), g.out, "perplexity");
  return 0;
}

int cmd_pareto(const Globals& g) {
  const auto config = load_config(g);
  const auto ctx = prepare_context(config);
  const std::vector<Tier> tiers{Tier::kSoft, Tier::kMid, Tier::kHard};
  print_report(sweep_pareto(ctx, config, tiers), g.out, "pareto");
  return 0;
}

int cmd_robustness(const Globals& g, double p) {
  const auto config = load_config(g);
  std::vector<AttackConfig> attacks = config.attacks;
  if (attacks.empty()) {
    for (AttackKind k : {AttackKind::kWordSub, AttackKind::kWordDel, AttackKind::kWordSubContext}) {
      attacks.push_back({k, p, config.seed, 5});
    }
  }
  const auto ctx = prepare_context(config);
  print_report(robustness_suite(ctx, config, attacks), g.out, "robustness");
  return 0;
}

int cmd_bench(const Globals& g, LatencyConfig lc, const SchemeFlags& flags) {
  const auto config = load_config(g);
  lc.seed = config.seed;
  lc.scheme = flags.resolve(config);
  lc.theta = config.thetas.front();
  lc.beta = config.beta;
  print_report(bench_latency(lc), g.out, "latency");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capacity-aware watermarking toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON experiment configuration");
  app.add_option("--seed", g.seed, "master seed");
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--backend", g.backend, "language model backend")->check(CLI::IsMember({"transformer", "ngram"}));
  app.add_option("--model", g.model, "saved model file");
  app.add_option("--key", g.key, "watermark key, hex, at least 16 bytes");

  int corpus_n = 100;
  bool save_model = false;
  auto* gen_corpus_cmd = app.add_subcommand("gen-corpus", "write synthetic task prompts");
  gen_corpus_cmd->add_option("--n", corpus_n, "number of items")->capture_default_str()->check(CLI::PositiveNumber);
  gen_corpus_cmd->add_flag("--save-model", save_model, "also write the task model to <out>/model.json");

  auto* train_cmd = app.add_subcommand("train-evaluator", "label positions and train the capacity evaluator");

  GenerateFlags gf;
  auto* generate_cmd = app.add_subcommand("generate", "generate (watermarked) completions");
  generate_cmd->add_option("--method", gf.method)
      ->check(CLI::IsMember({"greedy", "plain", "entropy", "caw"}))
      ->capture_default_str();
  generate_cmd->add_option("--corpus", gf.corpus, "corpus.jsonl from gen-corpus");
  generate_cmd->add_option("--prompt", gf.prompt, "comma-separated token ids");
  generate_cmd->add_option("--n", gf.n, "fresh task prompts when no corpus is given")->capture_default_str();
  generate_cmd->add_option("--theta", gf.theta, "capacity threshold");
  generate_cmd->add_option("--entropy-threshold", gf.entropy_threshold, "gate for the entropy method");
  generate_cmd->add_option("--max-new-tokens", gf.max_new_tokens);
  generate_cmd->add_option("--sample-seed", gf.sample_seed, "sample instead of greedy (baselines only)");
  generate_cmd->add_option("--branch", gf.branch)
      ->check(CLI::IsMember({"tree", "sequential", "batched"}))
      ->capture_default_str();
  generate_cmd->add_flag("--traces", gf.traces, "write per-text decision traces to <out>/traces/");
  gf.scheme.add(generate_cmd);

  std::string detect_input, detect_tokens;
  double threshold = kDefaultZThreshold;
  SchemeFlags detect_scheme;
  auto* detect_cmd = app.add_subcommand("detect", "score texts for a watermark");
  detect_cmd->add_option("--input", detect_input, "JSONL with a 'tokens' array per line");
  detect_cmd->add_option("--tokens", detect_tokens, "comma-separated token ids");
  detect_cmd->add_option("--threshold", threshold, "z threshold")->capture_default_str();
  detect_scheme.add(detect_cmd);

  std::string attack_input, attack_kind = "word_sub";
  AttackConfig attack;
  auto* attack_cmd = app.add_subcommand("attack", "perturb texts");
  attack_cmd->add_option("--input", attack_input, "JSONL with a 'tokens' array per line")->required();
  attack_cmd->add_option("--kind", attack_kind)
      ->check(CLI::IsMember({"word_sub", "word_del", "word_sub_context"}))
      ->capture_default_str();
  attack_cmd->add_option("--p", attack.p, "per-token probability")->capture_default_str();
  attack_cmd->add_option("--topk", attack.topk, "pool for the contextual attack")->capture_default_str();

  bool with_perplexity = false;
  auto* experiment_cmd = app.add_subcommand("experiment", "accuracy and detection table");
  experiment_cmd->add_flag("--perplexity", with_perplexity, "also write the perplexity analysis");

  auto* pareto_cmd = app.add_subcommand("pareto", "soft/mid/hard sweep of every method");

  double robustness_p = 0.1;
  auto* robustness_cmd = app.add_subcommand("robustness", "detection loss under attacks");
  robustness_cmd->add_option("--p", robustness_p, "attack strength when the config lists none")
      ->capture_default_str();

  LatencyConfig lc;
  auto* bench_cmd = app.add_subcommand("bench", "wall-time of the decode modes");
  bench_cmd->add_option("--runs", lc.runs)->capture_default_str();
  bench_cmd->add_option("--prompt-length", lc.prompt_length)->capture_default_str();
  bench_cmd->add_option("--new-tokens", lc.new_tokens)->capture_default_str();
  bench_cmd->add_option("--embed-dim", lc.model.embed_dim)->capture_default_str();
  SchemeFlags bench_scheme;
  bench_scheme.add(bench_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen_corpus_cmd) return cmd_gen_corpus(g, corpus_n, save_model);
    if (*train_cmd) return cmd_train_evaluator(g);
    if (*generate_cmd) return cmd_generate(g, gf);
    if (*detect_cmd) return cmd_detect(g, detect_input, detect_tokens, threshold, detect_scheme);
    if (*attack_cmd) {
      attack.kind = attack_kind_from_string(attack_kind);
      attack.seed = g.seed.value_or(1);
      return cmd_attack(g, attack_input, attack);
    }
    if (*experiment_cmd) return cmd_experiment(g, with_perplexity);
    if (*pareto_cmd) return cmd_pareto(g);
    if (*robustness_cmd) return cmd_robustness(g, robustness_p);
    if (*bench_cmd) return cmd_bench(g, lc, bench_scheme);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const UsageError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
