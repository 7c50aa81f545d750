#include "capwm/harness/task.hpp"

#include <algorithm>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

namespace capwm {

using namespace task_tokens;

void TaskSpec::validate() const {
  if (modulus < 2) throw ConfigError("modulus must be >= 2");
  if (filler_length < 0 || style_length < 0) throw ConfigError("segment lengths must be >= 0");
  if (filler_class < 1 || style_class < 2) throw ConfigError("filler class needs >= 1 token, style class >= 2");
  if (style_length > style_class) throw ConfigError("style_length must not exceed style_class");
  if (!(style_noise >= 0 && style_noise < 1) || !(answer_noise >= 0 && answer_noise < 1)) {
    throw ConfigError("noise rates must lie in [0, 1)");
  }
  if (shots < 0) throw ConfigError("shots must be >= 0");
  if (kDigit0 + modulus + filler_class + style_class > vocab_size) throw ConfigError("vocabulary too small for task");
}

SyntheticTask::SyntheticTask(TaskSpec spec) : spec_(spec) {
  spec_.validate();
  filler_begin_ = kDigit0 + spec_.modulus;
  style_begin_ = filler_begin_ + spec_.filler_class;
}

namespace {

// Uniform draw from [0, n) excluding `skip`.
int other_than(int skip, int n, SplitMix64& rng) {
  const int r = static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 1)));
  return r >= skip ? r + 1 : r;
}

}  // namespace

TokenSeq SyntheticTask::completion(int a, int b, SplitMix64& rng, bool noisy) const {
  const int m = spec_.modulus;
  int s = (a + b) % m;
  if (noisy && rng.bernoulli(spec_.answer_noise)) s = other_than(s, m, rng);
  TokenSeq out{digit(a), kPlus, digit(b), kEquals, digit(s), kSep};
  for (int i = 0; i < spec_.style_length; ++i) {
    int g = i;
    if (noisy && rng.bernoulli(spec_.style_noise)) g = other_than(i, spec_.style_class, rng);
    out.push_back(style(g));
  }
  out.insert(out.end(), {kAnswer, digit(s), kSep});
  for (int i = 0; i < spec_.filler_length; ++i) {
    out.push_back(filler(static_cast<int>(rng.below(static_cast<std::uint64_t>(spec_.filler_class)))));
  }
  out.push_back(kEos);
  return out;
}

TokenSeq SyntheticTask::question(int a, int b) const { return {kQuestion, digit(a), digit(b)}; }

TaskItem SyntheticTask::sample(SplitMix64& rng) const {
  const auto m = static_cast<std::uint64_t>(spec_.modulus);
  TaskItem item;
  item.prompt.push_back(kBos);
  for (int k = 0; k < spec_.shots; ++k) {
    const int a = static_cast<int>(rng.below(m));
    const int b = static_cast<int>(rng.below(m));
    const auto q = question(a, b);
    const auto c = completion(a, b, rng, false);
    item.prompt.insert(item.prompt.end(), q.begin(), q.end());
    item.prompt.insert(item.prompt.end(), c.begin(), c.end());
  }
  const int a = static_cast<int>(rng.below(m));
  const int b = static_cast<int>(rng.below(m));
  const auto q = question(a, b);
  item.prompt.insert(item.prompt.end(), q.begin(), q.end());
  item.reference = completion(a, b, rng, false);
  item.answer = (a + b) % spec_.modulus;
  return item;
}

TokenSeq SyntheticTask::training_document(SplitMix64& rng) const {
  const auto m = static_cast<std::uint64_t>(spec_.modulus);
  TokenSeq doc{kBos};
  for (int k = 0; k <= spec_.shots; ++k) {
    const int a = static_cast<int>(rng.below(m));
    const int b = static_cast<int>(rng.below(m));
    const auto q = question(a, b);
    const auto c = completion(a, b, rng, true);
    doc.insert(doc.end(), q.begin(), q.end());
    doc.insert(doc.end(), c.begin(), c.end());
  }
  return doc;
}

std::optional<int> SyntheticTask::extract(std::span<const TokenId> completion) const {
  if (std::find(completion.begin(), completion.end(), kEos) == completion.end()) return std::nullopt;
  const auto ans = std::find(completion.begin(), completion.end(), kAnswer);
  if (completion.end() - ans < 3 || ans[2] != kSep) return std::nullopt;
  const int d = ans[1] - kDigit0;
  if (d < 0 || d >= spec_.modulus) return std::nullopt;
  return d;
}

SynonymTable SyntheticTask::synonyms() const {
  std::vector<int> classes(static_cast<std::size_t>(spec_.vocab_size));
  for (std::size_t t = 0; t < classes.size(); ++t) classes[t] = static_cast<int>(t);
  const int filler_tag = spec_.vocab_size;
  const int style_tag = spec_.vocab_size + 1;
  for (int i = 0; i < spec_.filler_class; ++i) classes[static_cast<std::size_t>(filler(i))] = filler_tag;
  for (int i = 0; i < spec_.style_class; ++i) classes[static_cast<std::size_t>(style(i))] = style_tag;
  return SynonymTable(std::move(classes));
}

std::vector<TaskItem> gen_corpus(const SyntheticTask& task, int n, std::uint64_t seed) {
  if (n < 1) throw UsageError("corpus size must be >= 1");
  SplitMix64 rng(seed);
  std::vector<TaskItem> corpus;
  corpus.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) corpus.push_back(task.sample(rng));
  return corpus;
}

NGramParams train_task_model(const SyntheticTask& task, int documents, std::uint64_t seed, int order,
                             double alpha) {
  if (documents < 1) throw UsageError("need at least one training document");
  SplitMix64 rng(seed);
  std::vector<TokenSeq> docs;
  docs.reserve(static_cast<std::size_t>(documents));
  for (int i = 0; i < documents; ++i) docs.push_back(task.training_document(rng));
  NGramParams params = make_ngram(order, task.vocab_size(), alpha);
  fit_ngram(params, docs);
  return params;
}

void save_corpus(std::span<const TaskItem> corpus, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& item : corpus) {
    out << nlohmann::json{{"prompt", item.prompt}, {"reference", item.reference}, {"answer", item.answer}}.dump()
        << '\n';
  }
}

std::vector<TaskItem> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<TaskItem> corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      corpus.push_back({j.at("prompt").get<TokenSeq>(), j.at("reference").get<TokenSeq>(), j.at("answer").get<int>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return corpus;
}

}  // namespace capwm
