#include "capwm/toylm/ngram.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

namespace capwm {
namespace {

constexpr int kFormatVersion = 1;

ProbDist smoothed(const std::vector<std::uint32_t>* counts, int vocab, double alpha) {
  ProbDist p(static_cast<std::size_t>(vocab), alpha);
  double total = alpha * vocab;
  if (counts != nullptr) {
    for (int t = 0; t < vocab; ++t) {
      p[static_cast<std::size_t>(t)] += (*counts)[static_cast<std::size_t>(t)];
      total += (*counts)[static_cast<std::size_t>(t)];
    }
  }
  for (double& x : p) x /= total;
  return p;
}

}  // namespace

void NGramParams::validate() const {
  if (order < 1) throw ConfigError("ngram: order must be >= 1");
  if (vocab_size < 2) throw ConfigError("ngram: vocab_size must be >= 2");
  if (!(alpha > 0.0)) throw ConfigError("ngram: alpha must be positive");
}

NGramParams make_ngram(int order, int vocab_size, double alpha) {
  NGramParams p;
  p.order = order;
  p.vocab_size = vocab_size;
  p.alpha = alpha;
  p.validate();
  p.unigram.assign(static_cast<std::size_t>(vocab_size), 0);
  return p;
}

void fit_ngram(NGramParams& params, std::span<const TokenSeq> corpus) {
  params.validate();
  const std::size_t ctx = static_cast<std::size_t>(params.order - 1);
  for (const TokenSeq& seq : corpus) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const TokenId t = seq[i];
      if (t < 0 || t >= params.vocab_size) throw DataError("ngram: token outside the vocabulary");
      ++params.unigram[static_cast<std::size_t>(t)];
      if (ctx == 0 || i < ctx) continue;
      TokenSeq key(seq.begin() + static_cast<std::ptrdiff_t>(i - ctx), seq.begin() + static_cast<std::ptrdiff_t>(i));
      auto [it, inserted] = params.contexts.try_emplace(std::move(key));
      if (inserted) it->second.assign(static_cast<std::size_t>(params.vocab_size), 0);
      ++it->second[static_cast<std::size_t>(t)];
    }
  }
}

ProbDist ngram_next(const NGramParams& params, std::span<const TokenId> prefix) {
  const std::size_t ctx = static_cast<std::size_t>(params.order - 1);
  if (ctx > 0 && prefix.size() >= ctx) {
    const TokenSeq key(prefix.end() - static_cast<std::ptrdiff_t>(ctx), prefix.end());
    if (auto it = params.contexts.find(key); it != params.contexts.end()) {
      return smoothed(&it->second, params.vocab_size, params.alpha);
    }
  }
  const bool has_unigram = params.unigram.size() == static_cast<std::size_t>(params.vocab_size);
  return smoothed(has_unigram ? &params.unigram : nullptr, params.vocab_size, params.alpha);
}

void save_ngram(const NGramParams& params, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["backend"] = "ngram";
  j["config"] = {{"order", params.order}, {"vocab_size", params.vocab_size}, {"alpha", params.alpha}};
  j["unigram"] = params.unigram;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [ctx, counts] : params.contexts) rows.push_back({{"context", ctx}, {"counts", counts}});
  j["contexts"] = std::move(rows);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump();
}

NGramParams load_ngram(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed model file " + path.string() + ": " + e.what());
  }
  if (j.value("format_version", 0) != kFormatVersion || j.value("backend", "") != "ngram") {
    throw DataError("unsupported n-gram model file " + path.string());
  }
  const auto& c = j.at("config");
  NGramParams p = make_ngram(c.at("order").get<int>(), c.at("vocab_size").get<int>(), c.at("alpha").get<double>());
  p.unigram = j.at("unigram").get<std::vector<std::uint32_t>>();
  for (const auto& row : j.at("contexts")) {
    p.contexts.emplace(row.at("context").get<TokenSeq>(), row.at("counts").get<std::vector<std::uint32_t>>());
  }
  return p;
}

namespace {

class NGramSession final : public DecodeSession {
 public:
  explicit NGramSession(std::shared_ptr<const NGramParams> params) : params_(std::move(params)) {}

  LogitsRow extend(std::span<const TokenId> tokens) override {
    if (tokens.empty()) throw UsageError("extend: no tokens");
    for (TokenId t : tokens) {
      if (t < 0 || t >= params_->vocab_size) throw UsageError("token outside the vocabulary");
    }
    prefix_.insert(prefix_.end(), tokens.begin(), tokens.end());
    ++counters_.extend_calls;
    ++counters_.rows_computed;
    return logits_after(prefix_);
  }

  BranchSet branch(std::span<const TokenId> candidates, BranchMode) override {
    check_candidates(candidates, params_->vocab_size);
    if (prefix_.empty()) throw UsageError("branch: empty prefix");
    ++counters_.branch_calls;
    counters_.rows_computed += candidates.size();
    BranchSet set;
    set.candidates.assign(candidates.begin(), candidates.end());
    TokenSeq extended = prefix_;
    extended.push_back(0);
    for (TokenId c : candidates) {
      extended.back() = c;
      set.logits.push_back(logits_after(extended));
      set.state.emplace_back();
    }
    return set;
  }

  void commit(const BranchSet& branches, std::size_t index) override {
    if (index >= branches.candidates.size()) throw UsageError("commit: branch index out of range");
    ++counters_.commit_calls;
    prefix_.push_back(branches.candidates[index]);
  }

  std::size_t length() const override { return prefix_.size(); }

 private:
  LogitsRow logits_after(std::span<const TokenId> prefix) const {
    ProbDist p = ngram_next(*params_, prefix);
    for (double& x : p) x = std::log(x);
    return p;
  }

  std::shared_ptr<const NGramParams> params_;
  TokenSeq prefix_;
};

}  // namespace

NGramModel::NGramModel(std::shared_ptr<const NGramParams> params) : params_(std::move(params)) {
  params_->validate();
}

NGramModel::NGramModel(NGramParams params) : NGramModel(std::make_shared<const NGramParams>(std::move(params))) {}

std::unique_ptr<DecodeSession> NGramModel::open_session() const { return std::make_unique<NGramSession>(params_); }

}  // namespace capwm
