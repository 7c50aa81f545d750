#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <vector>

#include "capwm/common.hpp"
#include "capwm/toylm/language_model.hpp"

namespace capwm {

// Add-alpha smoothed n-gram counts. A context of the last (order - 1) tokens
// that was never seen falls back to the add-alpha unigram distribution.
struct NGramParams {
  int order = 3;
  int vocab_size = 64;
  double alpha = 1.0;
  std::map<TokenSeq, std::vector<std::uint32_t>> contexts;
  std::vector<std::uint32_t> unigram;

  void validate() const;
};

NGramParams make_ngram(int order, int vocab_size, double alpha);

// Adds every (context, next) pair of each sequence to the tables. Positions
// with fewer than order - 1 preceding tokens only update the unigram counts.
void fit_ngram(NGramParams& params, std::span<const TokenSeq> corpus);

// Smoothed next-token distribution; every entry is strictly positive.
ProbDist ngram_next(const NGramParams& params, std::span<const TokenId> prefix);

void save_ngram(const NGramParams& params, const std::filesystem::path& path);
NGramParams load_ngram(const std::filesystem::path& path);

class NGramModel final : public LanguageModel {
 public:
  explicit NGramModel(std::shared_ptr<const NGramParams> params);
  explicit NGramModel(NGramParams params);

  int vocab_size() const override { return params_->vocab_size; }
  std::string backend_name() const override { return "ngram"; }
  std::unique_ptr<DecodeSession> open_session() const override;

  const NGramParams& params() const { return *params_; }

 private:
  std::shared_ptr<const NGramParams> params_;
};

}  // namespace capwm
