#include "capwm/toylm/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <fstream>
#include <nlohmann/json.hpp>

#include "capwm/prf.hpp"

namespace capwm {
namespace {

constexpr int kFormatVersion = 1;
constexpr double kLayerNormEps = 1e-5;

enum class NewRowAttention { kCausal, kSelfOnly, kNone };

void layer_norm(const RowMatrix& x, const Eigen::VectorXd& gain, const Eigen::VectorXd& bias,
                RowMatrix& out) {
  out.resize(x.rows(), x.cols());
  const double d = static_cast<double>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).sum() / d;
    const double var = (x.row(r).array() - mean).square().sum() / d;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    out.row(r) = ((x.row(r).array() - mean) * inv * gain.transpose().array() +
                  bias.transpose().array())
                     .matrix();
  }
}

double gelu(double x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x)));
}

RowMatrix embed(const TransformerParams& p, std::span<const TokenId> tokens, std::span<const int> positions) {
  const int d = p.config.embed_dim;
  RowMatrix x(static_cast<Eigen::Index>(tokens.size()), d);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    const TokenId t = tokens[r];
    if (t < 0 || t >= p.config.vocab_size) throw UsageError("token outside the vocabulary");
    x.row(static_cast<Eigen::Index>(r)) = p.token_embedding.row(t);
    for (int i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
      x(static_cast<Eigen::Index>(r), i) += std::sin(positions[r] * freq);
      if (i + 1 < d) x(static_cast<Eigen::Index>(r), i + 1) += std::cos(positions[r] * freq);
    }
  }
  return x;
}

// out = x * w for a handful of rows. Streams each weight row once for all
// rows of x, so a few rows cost about as much as one when the weights do not
// fit in cache.
void small_rows_product(const RowMatrix& x, const RowMatrix& w, RowMatrix& out) {
  constexpr Eigen::Index kBlock = 256;
  const Eigen::Index rows = x.rows(), inner = x.cols(), cols = w.cols();
  out.setZero(rows, cols);
  const double* xd = x.data();
  const double* wd = w.data();
  for (Eigen::Index j0 = 0; j0 < cols; j0 += kBlock) {
    const Eigen::Index nb = std::min(kBlock, cols - j0);
    Eigen::Index k = 0;
    for (; k + 4 <= inner; k += 4) {
      const double* w0 = wd + k * cols + j0;
      const double* w1 = w0 + cols;
      const double* w2 = w1 + cols;
      const double* w3 = w2 + cols;
      Eigen::Index r = 0;
      for (; r + 2 <= rows; r += 2) {
        const double* xa = xd + r * inner + k;
        const double* xb = xa + inner;
        const double a0 = xa[0], a1 = xa[1], a2 = xa[2], a3 = xa[3];
        const double b0 = xb[0], b1 = xb[1], b2 = xb[2], b3 = xb[3];
        double* __restrict o = out.data() + r * cols + j0;
        double* __restrict q = o + cols;
        for (Eigen::Index j = 0; j < nb; ++j) {
          const double v0 = w0[j], v1 = w1[j], v2 = w2[j], v3 = w3[j];
          o[j] += a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3;
          q[j] += b0 * v0 + b1 * v1 + b2 * v2 + b3 * v3;
        }
      }
      for (; r < rows; ++r) {
        const double* xa = xd + r * inner + k;
        const double a0 = xa[0], a1 = xa[1], a2 = xa[2], a3 = xa[3];
        double* __restrict o = out.data() + r * cols + j0;
        for (Eigen::Index j = 0; j < nb; ++j) o[j] += a0 * w0[j] + a1 * w1[j] + a2 * w2[j] + a3 * w3[j];
      }
    }
    for (; k < inner; ++k) {
      const double* w0 = wd + k * cols + j0;
      for (Eigen::Index r = 0; r < rows; ++r) {
        const double a0 = xd[r * inner + k];
        double* o = out.data() + r * cols + j0;
        for (Eigen::Index j = 0; j < nb; ++j) o[j] += a0 * w0[j];
      }
    }
  }
}

RowMatrix product(const RowMatrix& x, const RowMatrix& w) {
  constexpr Eigen::Index kSmallRows = 16;
  if (x.rows() >= 2 && x.rows() <= kSmallRows) {
    RowMatrix out;
    small_rows_product(x, w, out);
    return out;
  }
  RowMatrix out = x * w;
  return out;
}

void feed_forward(const LayerParams& layer, RowMatrix& x) {
  RowMatrix h;
  layer_norm(x, layer.ln2_gain, layer.ln2_bias, h);
  RowMatrix f = product(h, layer.w1);
  f.rowwise() += layer.b1.transpose();
  f = f.unaryExpr([](double v) { return gelu(v); });
  x += product(f, layer.w2);
  x.rowwise() += layer.b2.transpose();
}

RowMatrix unembed(const TransformerParams& p, const RowMatrix& x) {
  RowMatrix h;
  layer_norm(x, p.final_gain, p.final_bias, h);
  return product(h, p.unembedding);
}

struct RowsOutput {
  RowMatrix logits;
  std::vector<RowMatrix> keys;
  std::vector<RowMatrix> values;
};

// New rows attend to every cached position plus the new rows allowed by
// `mode`. The cache is read only.
RowsOutput run_rows(const TransformerParams& p, const GenerationCache& cache, std::span<const TokenId> tokens,
                    std::span<const int> positions, NewRowAttention mode) {
  const int d = p.config.embed_dim;
  const int heads = p.config.heads;
  const int hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto rows = static_cast<Eigen::Index>(tokens.size());
  const auto n = static_cast<Eigen::Index>(cache.length);

  RowsOutput out;
  RowMatrix x = embed(p, tokens, positions);
  RowMatrix h, attn(rows, d);
  Eigen::VectorXd wc(n), wn(rows);
  std::vector<char> allowed(static_cast<std::size_t>(rows));
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const LayerParams& layer = p.layers[l];
    layer_norm(x, layer.ln1_gain, layer.ln1_bias, h);
    RowMatrix q = product(h, layer.wq);
    RowMatrix k = product(h, layer.wk);
    RowMatrix v = product(h, layer.wv);
    Eigen::Map<const RowMatrix> kc(cache.keys[l].data(), n, d);
    Eigen::Map<const RowMatrix> vc(cache.values[l].data(), n, d);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index j = 0; j < rows; ++j) {
        allowed[static_cast<std::size_t>(j)] = mode == NewRowAttention::kCausal     ? j <= r
                                               : mode == NewRowAttention::kSelfOnly ? j == r
                                                                                    : false;
      }
      for (int head = 0; head < heads; ++head) {
        const Eigen::Index off = head * hd;
        const auto qh = q.row(r).segment(off, hd);
        double mx = -std::numeric_limits<double>::infinity();
        if (n > 0) {
          wc.noalias() = kc.middleCols(off, hd) * qh.transpose();
          wc *= scale;
          mx = wc.maxCoeff();
        }
        for (Eigen::Index j = 0; j < rows; ++j) {
          if (!allowed[static_cast<std::size_t>(j)]) continue;
          wn(j) = k.row(j).segment(off, hd).dot(qh) * scale;
          mx = std::max(mx, wn(j));
        }
        double sum = 0.0;
        if (n > 0) {
          wc = (wc.array() - mx).exp().matrix();
          sum += wc.sum();
        }
        for (Eigen::Index j = 0; j < rows; ++j) {
          wn(j) = allowed[static_cast<std::size_t>(j)] ? std::exp(wn(j) - mx) : 0.0;
          sum += wn(j);
        }
        auto dst = attn.row(r).segment(off, hd);
        dst.setZero();
        if (n > 0) dst.noalias() += wc.transpose() * vc.middleCols(off, hd);
        for (Eigen::Index j = 0; j < rows; ++j) {
          if (wn(j) != 0.0) dst += wn(j) * v.row(j).segment(off, hd);
        }
        dst /= sum;
      }
    }
    x += product(attn, layer.wo);
    feed_forward(layer, x);
    out.keys.push_back(std::move(k));
    out.values.push_back(std::move(v));
  }
  out.logits = unembed(p, x);
  return out;
}

LogitsRow row_vector(const RowMatrix& m, Eigen::Index r) {
  LogitsRow out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(c)] = m(r, c);
  return out;
}

void append_rows(std::vector<double>& dst, const RowMatrix& src, Eigen::Index first, Eigen::Index count) {
  for (Eigen::Index r = first; r < first + count; ++r) {
    for (Eigen::Index c = 0; c < src.cols(); ++c) dst.push_back(src(r, c));
  }
}

RowMatrix random_matrix(SplitMix64& rng, int rows, int cols, double stddev) {
  RowMatrix m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = stddev * rng.normal();
  }
  return m;
}

template <typename Visit>
void for_each_tensor(TransformerParams& p, Visit&& visit) {
  visit(p.token_embedding.data(), p.token_embedding.size());
  for (LayerParams& l : p.layers) {
    visit(l.ln1_gain.data(), l.ln1_gain.size());
    visit(l.ln1_bias.data(), l.ln1_bias.size());
    visit(l.wq.data(), l.wq.size());
    visit(l.wk.data(), l.wk.size());
    visit(l.wv.data(), l.wv.size());
    visit(l.wo.data(), l.wo.size());
    visit(l.ln2_gain.data(), l.ln2_gain.size());
    visit(l.ln2_bias.data(), l.ln2_bias.size());
    visit(l.w1.data(), l.w1.size());
    visit(l.b1.data(), l.b1.size());
    visit(l.w2.data(), l.w2.size());
    visit(l.b2.data(), l.b2.size());
  }
  visit(p.final_gain.data(), p.final_gain.size());
  visit(p.final_bias.data(), p.final_bias.size());
  visit(p.unembedding.data(), p.unembedding.size());
}

}  // namespace

void TransformerConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("transformer: vocab_size must be >= 2");
  if (embed_dim < 4) throw ConfigError("transformer: embed_dim must be >= 4");
  if (layers < 1) throw ConfigError("transformer: layers must be >= 1");
  if (heads < 1 || embed_dim % heads != 0) throw ConfigError("transformer: heads must divide embed_dim");
  if (!(logit_scale > 0.0)) throw ConfigError("transformer: logit_scale must be positive");
}

std::vector<double> TransformerParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  auto& self = const_cast<TransformerParams&>(*this);
  for_each_tensor(self, [&](double* data, Eigen::Index size) { flat.insert(flat.end(), data, data + size); });
  return flat;
}

void TransformerParams::unflatten(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw DataError("transformer: weight array has the wrong length");
  std::size_t offset = 0;
  for_each_tensor(*this, [&](double* data, Eigen::Index size) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), size, data);
    offset += static_cast<std::size_t>(size);
  });
}

std::size_t TransformerParams::parameter_count() const {
  std::size_t count = 0;
  auto& self = const_cast<TransformerParams&>(*this);
  for_each_tensor(self, [&](double*, Eigen::Index size) { count += static_cast<std::size_t>(size); });
  return count;
}

TransformerParams init_transformer(const TransformerConfig& config) {
  config.validate();
  const int v = config.vocab_size;
  const int d = config.embed_dim;
  const int f = 4 * d;
  SplitMix64 rng(mix64(config.seed));
  TransformerParams p;
  p.config = config;
  p.token_embedding = random_matrix(rng, v, d, 1.0);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (int l = 0; l < config.layers; ++l) {
    LayerParams layer;
    layer.ln1_gain = Eigen::VectorXd::Ones(d);
    layer.ln1_bias = Eigen::VectorXd::Zero(d);
    layer.wq = random_matrix(rng, d, d, sd);
    layer.wk = random_matrix(rng, d, d, sd);
    layer.wv = random_matrix(rng, d, d, sd);
    layer.wo = random_matrix(rng, d, d, sd);
    layer.ln2_gain = Eigen::VectorXd::Ones(d);
    layer.ln2_bias = Eigen::VectorXd::Zero(d);
    layer.w1 = random_matrix(rng, d, f, sd);
    layer.b1 = Eigen::VectorXd::Zero(f);
    layer.w2 = random_matrix(rng, f, d, 1.0 / std::sqrt(static_cast<double>(f)));
    layer.b2 = Eigen::VectorXd::Zero(d);
    p.layers.push_back(std::move(layer));
  }
  p.final_gain = Eigen::VectorXd::Ones(d);
  p.final_bias = Eigen::VectorXd::Zero(d);
  p.unembedding = random_matrix(rng, d, v, config.logit_scale * sd);
  return p;
}

std::size_t GenerationCache::bytes() const {
  std::size_t total = 0;
  for (const auto& k : keys) total += k.size() * sizeof(double);
  for (const auto& v : values) total += v.size() * sizeof(double);
  return total;
}

GenerationCache make_cache(const TransformerParams& params) {
  GenerationCache cache;
  cache.keys.resize(params.layers.size());
  cache.values.resize(params.layers.size());
  return cache;
}

LogitsRow forward_next(const TransformerParams& params, std::span<const TokenId> prefix, GenerationCache& cache) {
  if (prefix.empty()) throw UsageError("forward_next: empty prefix");
  if (cache.keys.size() != params.layers.size()) throw UsageError("forward_next: cache/model layer mismatch");
  if (prefix.size() <= cache.length) throw UsageError("forward_next: prefix has no uncached tokens");
  const std::size_t fresh = prefix.size() - cache.length;
  std::vector<int> positions(fresh);
  for (std::size_t i = 0; i < fresh; ++i) positions[i] = static_cast<int>(cache.length + i);
  RowsOutput out = run_rows(params, cache, prefix.subspan(cache.length), positions, NewRowAttention::kCausal);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    append_rows(cache.keys[l], out.keys[l], 0, out.keys[l].rows());
    append_rows(cache.values[l], out.values[l], 0, out.values[l].rows());
  }
  cache.length = prefix.size();
  return row_vector(out.logits, out.logits.rows() - 1);
}

TreeResult tree_decode(const TransformerParams& params, std::span<const TokenId> prefix,
                       std::span<const TokenId> candidates, const GenerationCache& cache, TreeMaskVariant variant) {
  if (prefix.empty()) throw UsageError("tree_decode: empty prefix");
  if (cache.length != prefix.size()) throw UsageError("tree_decode: cache must hold exactly the prefix");
  check_candidates(candidates, params.config.vocab_size);
  std::vector<int> positions(candidates.size(), static_cast<int>(prefix.size()));
  const auto mode = variant == TreeMaskVariant::kSelfExempt ? NewRowAttention::kSelfOnly : NewRowAttention::kNone;
  RowsOutput out = run_rows(params, cache, candidates, positions, mode);
  TreeResult result;
  for (Eigen::Index r = 0; r < out.logits.rows(); ++r) {
    result.logits.push_back(row_vector(out.logits, r));
    std::vector<double> kv;
    kv.reserve(2 * params.layers.size() * static_cast<std::size_t>(params.config.embed_dim));
    for (std::size_t l = 0; l < params.layers.size(); ++l) append_rows(kv, out.keys[l], r, 1);
    for (std::size_t l = 0; l < params.layers.size(); ++l) append_rows(kv, out.values[l], r, 1);
    result.kv.push_back(std::move(kv));
  }
  return result;
}

void commit_branch(GenerationCache& cache, const TreeResult& result, std::size_t index) {
  if (index >= result.kv.size()) throw UsageError("commit_branch: index out of range");
  const std::size_t layers = cache.keys.size();
  const auto& kv = result.kv[index];
  const std::size_t d = kv.size() / (2 * layers);
  for (std::size_t l = 0; l < layers; ++l) {
    cache.keys[l].insert(cache.keys[l].end(), kv.begin() + l * d, kv.begin() + (l + 1) * d);
    cache.values[l].insert(cache.values[l].end(), kv.begin() + (layers + l) * d, kv.begin() + (layers + l + 1) * d);
  }
  ++cache.length;
}

std::vector<LogitsRow> forward_masked(const TransformerParams& params, std::span<const TokenId> tokens,
                                      std::span<const int> positions, const AttentionMask& mask) {
  if (tokens.empty()) throw UsageError("forward_masked: no tokens");
  if (positions.size() != tokens.size() || mask.size() != tokens.size()) {
    throw UsageError("forward_masked: tokens, positions and mask sizes differ");
  }
  const int d = params.config.embed_dim;
  const int heads = params.config.heads;
  const int hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto n = static_cast<Eigen::Index>(tokens.size());
  RowMatrix x = embed(params, tokens, positions);
  RowMatrix h, attn(n, d);
  for (const LayerParams& layer : params.layers) {
    layer_norm(x, layer.ln1_gain, layer.ln1_bias, h);
    const RowMatrix q = h * layer.wq;
    const RowMatrix k = h * layer.wk;
    const RowMatrix v = h * layer.wv;
    for (int head = 0; head < heads; ++head) {
      RowMatrix s = q.middleCols(head * hd, hd) * k.middleCols(head * hd, hd).transpose() * scale;
      for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index c = 0; c < n; ++c) {
          if (mask.blocked(static_cast<std::size_t>(j), static_cast<std::size_t>(c))) s(j, c) += kMaskSentinel;
        }
        const double mx = s.row(j).maxCoeff();
        s.row(j) = (s.row(j).array() - mx).exp().matrix();
        s.row(j) /= s.row(j).sum();
      }
      attn.middleCols(head * hd, hd) = s * v.middleCols(head * hd, hd);
    }
    x += attn * layer.wo;
    feed_forward(layer, x);
  }
  const RowMatrix logits = unembed(params, x);
  std::vector<LogitsRow> out;
  for (Eigen::Index r = 0; r < n; ++r) out.push_back(row_vector(logits, r));
  return out;
}

void save_transformer(const TransformerParams& params, const std::filesystem::path& path) {
  const auto& c = params.config;
  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["backend"] = "transformer";
  j["config"] = {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim}, {"layers", c.layers},
                 {"heads", c.heads},           {"seed", c.seed},           {"logit_scale", c.logit_scale}};
  j["weights"] = params.flatten();
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump();
}

TransformerParams load_transformer(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed model file " + path.string() + ": " + e.what());
  }
  if (j.value("format_version", 0) != kFormatVersion || j.value("backend", "") != "transformer") {
    throw DataError("unsupported transformer model file " + path.string());
  }
  TransformerConfig c;
  const auto& jc = j.at("config");
  c.vocab_size = jc.at("vocab_size").get<int>();
  c.embed_dim = jc.at("embed_dim").get<int>();
  c.layers = jc.at("layers").get<int>();
  c.heads = jc.at("heads").get<int>();
  c.seed = jc.at("seed").get<std::uint64_t>();
  c.logit_scale = jc.at("logit_scale").get<double>();
  TransformerParams p = init_transformer(c);
  p.unflatten(j.at("weights").get<std::vector<double>>());
  return p;
}

namespace {

class TransformerSession final : public DecodeSession {
 public:
  explicit TransformerSession(std::shared_ptr<const TransformerParams> params)
      : params_(std::move(params)), cache_(make_cache(*params_)) {}

  LogitsRow extend(std::span<const TokenId> tokens) override {
    if (tokens.empty()) throw UsageError("extend: no tokens");
    prefix_.insert(prefix_.end(), tokens.begin(), tokens.end());
    ++counters_.extend_calls;
    counters_.rows_computed += tokens.size();
    return forward_next(*params_, prefix_, cache_);
  }

  BranchSet branch(std::span<const TokenId> candidates, BranchMode mode) override {
    check_candidates(candidates, params_->config.vocab_size);
    if (prefix_.empty()) throw UsageError("branch: empty prefix");
    ++counters_.branch_calls;
    counters_.rows_computed += candidates.size();
    BranchSet set;
    set.candidates.assign(candidates.begin(), candidates.end());
    const std::size_t d = static_cast<std::size_t>(params_->config.embed_dim);
    const std::size_t v = static_cast<std::size_t>(params_->config.vocab_size);
    const std::size_t r = candidates.size();
    switch (mode) {
      case BranchMode::kTree: {
        note_scratch(sizeof(double) * r * (cache_.length + r + 8 * d + v));
        TreeResult tree = tree_decode(*params_, prefix_, candidates, cache_);
        set.logits = std::move(tree.logits);
        set.state = std::move(tree.kv);
        break;
      }
      case BranchMode::kSequential: {
        note_scratch(cache_.bytes() + sizeof(double) * (cache_.length + 1 + 8 * d + v));
        TokenSeq extended = prefix_;
        extended.push_back(0);
        for (TokenId c : candidates) {
          GenerationCache fork = cache_;
          extended.back() = c;
          set.logits.push_back(forward_next(*params_, extended, fork));
          set.state.push_back(last_rows(fork));
        }
        break;
      }
      case BranchMode::kBatched: {
        note_scratch(r * (cache_.bytes() + sizeof(double) * (cache_.length + 1 + 8 * d + v)));
        std::vector<GenerationCache> forks(r, cache_);
        TokenSeq extended = prefix_;
        extended.push_back(0);
        for (std::size_t i = 0; i < r; ++i) {
          extended.back() = candidates[i];
          set.logits.push_back(forward_next(*params_, extended, forks[i]));
          set.state.push_back(last_rows(forks[i]));
        }
        break;
      }
    }
    return set;
  }

  void commit(const BranchSet& branches, std::size_t index) override {
    if (index >= branches.candidates.size() || index >= branches.state.size()) {
      throw UsageError("commit: branch index out of range");
    }
    ++counters_.commit_calls;
    TreeResult view;
    view.kv = {branches.state[index]};
    commit_branch(cache_, view, 0);
    prefix_.push_back(branches.candidates[index]);
  }

  std::size_t length() const override { return prefix_.size(); }

 private:
  std::vector<double> last_rows(const GenerationCache& fork) const {
    const std::size_t d = static_cast<std::size_t>(params_->config.embed_dim);
    std::vector<double> kv;
    for (const auto& k : fork.keys) kv.insert(kv.end(), k.end() - static_cast<std::ptrdiff_t>(d), k.end());
    for (const auto& v : fork.values) kv.insert(kv.end(), v.end() - static_cast<std::ptrdiff_t>(d), v.end());
    return kv;
  }

  std::shared_ptr<const TransformerParams> params_;
  GenerationCache cache_;
  TokenSeq prefix_;
};

}  // namespace

TransformerModel::TransformerModel(std::shared_ptr<const TransformerParams> params) : params_(std::move(params)) {}

TransformerModel::TransformerModel(const TransformerConfig& config)
    : params_(std::make_shared<const TransformerParams>(init_transformer(config))) {}

std::unique_ptr<DecodeSession> TransformerModel::open_session() const {
  return std::make_unique<TransformerSession>(params_);
}

}  // namespace capwm
