#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "capwm/common.hpp"
#include "capwm/toylm/language_model.hpp"
#include "capwm/toylm/tree_mask.hpp"

namespace capwm {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TransformerConfig {
  int vocab_size = 64;
  int embed_dim = 32;
  int layers = 2;
  int heads = 4;
  std::uint64_t seed = 7;
  // Standard deviation of the unembedding entries times sqrt(embed_dim);
  // larger values give sharper next-token distributions.
  double logit_scale = 2.0;

  void validate() const;
  bool operator==(const TransformerConfig&) const = default;
};

struct LayerParams {
  Eigen::VectorXd ln1_gain, ln1_bias;
  RowMatrix wq, wk, wv, wo;  // D x D, applied as x * W
  Eigen::VectorXd ln2_gain, ln2_bias;
  RowMatrix w1;  // D x 4D
  Eigen::VectorXd b1;
  RowMatrix w2;  // 4D x D
  Eigen::VectorXd b2;
};

// Pre-LayerNorm decoder-only transformer with sinusoidal positions and
// GELU feed-forward blocks. Immutable once built.
struct TransformerParams {
  TransformerConfig config;
  RowMatrix token_embedding;  // V x D
  std::vector<LayerParams> layers;
  Eigen::VectorXd final_gain, final_bias;
  RowMatrix unembedding;  // D x V

  // Every weight in a fixed order, row-major.
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);
  std::size_t parameter_count() const;
};

TransformerParams init_transformer(const TransformerConfig& config);

// Key/value rows for every committed position, per layer, row-major
// (length x D).
struct GenerationCache {
  std::vector<std::vector<double>> keys;
  std::vector<std::vector<double>> values;
  std::size_t length = 0;

  std::size_t bytes() const;
};

GenerationCache make_cache(const TransformerParams& params);

// Computes the positions in `prefix` not yet in `cache`, appends their
// key/value rows and returns the logits for the next position. At least one
// token of `prefix` must be uncached.
LogitsRow forward_next(const TransformerParams& params, std::span<const TokenId> prefix,
                       GenerationCache& cache);

struct TreeResult {
  std::vector<LogitsRow> logits;
  // Per candidate: keys then values of every layer, 2 * L * D doubles.
  std::vector<std::vector<double>> kv;
};

// All candidates in one masked pass. `cache` must hold exactly `prefix` and is
// not modified.
TreeResult tree_decode(const TransformerParams& params, std::span<const TokenId> prefix,
                       std::span<const TokenId> candidates, const GenerationCache& cache,
                       TreeMaskVariant variant = TreeMaskVariant::kSelfExempt);

// Appends one candidate's key/value rows from a tree pass.
void commit_branch(GenerationCache& cache, const TreeResult& result, std::size_t index);

// Reference forward pass without a cache: every row of `tokens` at its
// explicit position id, attention restricted by `mask`. Returns the logits of
// every row.
std::vector<LogitsRow> forward_masked(const TransformerParams& params, std::span<const TokenId> tokens,
                                      std::span<const int> positions, const AttentionMask& mask);

void save_transformer(const TransformerParams& params, const std::filesystem::path& path);
TransformerParams load_transformer(const std::filesystem::path& path);

class TransformerModel final : public LanguageModel {
 public:
  explicit TransformerModel(std::shared_ptr<const TransformerParams> params);
  explicit TransformerModel(const TransformerConfig& config);

  int vocab_size() const override { return params_->config.vocab_size; }
  std::string backend_name() const override { return "transformer"; }
  std::unique_ptr<DecodeSession> open_session() const override;

  const TransformerParams& params() const { return *params_; }

 private:
  std::shared_ptr<const TransformerParams> params_;
};

}  // namespace capwm
