#include "capwm/capacity/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>

#include "capwm/prf.hpp"

namespace capwm {
namespace {

constexpr int kFormatVersion = 1;
constexpr double kOutputFloor = 1e-15;

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Activations {
  Eigen::VectorXd z1, a1, z2, a2;
  double z3 = 0.0;
};

Activations forward(const EvaluatorParams& p, std::span<const double> features) {
  if (static_cast<Eigen::Index>(features.size()) != p.w1.cols()) {
    throw UsageError("evaluator input has length " + std::to_string(features.size()) + ", expected " +
                     std::to_string(p.w1.cols()));
  }
  const Eigen::Map<const Eigen::VectorXd> x(features.data(), static_cast<Eigen::Index>(features.size()));
  Activations a;
  a.z1 = p.w1 * x + p.b1;
  a.a1 = a.z1.cwiseMax(0.0);
  a.z2 = p.w2 * a.a1 + p.b2;
  a.a2 = a.z2.cwiseMax(0.0);
  a.z3 = p.w3.dot(a.a2) + p.b3;
  return a;
}

template <typename Visit>
void for_each_block(EvaluatorParams& p, Visit&& visit) {
  visit(p.w1.data(), p.w1.size());
  visit(p.b1.data(), p.b1.size());
  visit(p.w2.data(), p.w2.size());
  visit(p.b2.data(), p.b2.size());
  visit(p.w3.data(), p.w3.size());
  visit(&p.b3, Eigen::Index{1});
}

void check_labels(std::span<const LabeledSample> batch) {
  for (const auto& s : batch) {
    if (s.label != 0 && s.label != 1) throw DataError("sample label must be 0 or 1");
  }
}

}  // namespace

EvaluatorParams EvaluatorParams::zeros(const WindowShape& shape, int hidden1, int hidden2) {
  const int in = shape.feature_length();
  EvaluatorParams p;
  p.shape = shape;
  p.w1 = Eigen::MatrixXd::Zero(hidden1, in);
  p.b1 = Eigen::VectorXd::Zero(hidden1);
  p.w2 = Eigen::MatrixXd::Zero(hidden2, hidden1);
  p.b2 = Eigen::VectorXd::Zero(hidden2);
  p.w3 = Eigen::VectorXd::Zero(hidden2);
  p.b3 = 0.0;
  return p;
}

std::vector<double> EvaluatorParams::flatten() const {
  std::vector<double> flat;
  auto& self = const_cast<EvaluatorParams&>(*this);
  for_each_block(self, [&](double* data, Eigen::Index n) { flat.insert(flat.end(), data, data + n); });
  return flat;
}

void EvaluatorParams::unflatten(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw DataError("evaluator: weight array has the wrong length");
  std::size_t offset = 0;
  for_each_block(*this, [&](double* data, Eigen::Index n) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), n, data);
    offset += static_cast<std::size_t>(n);
  });
}

std::size_t EvaluatorParams::parameter_count() const {
  return static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + b2.size() + w3.size() + 1);
}

EvaluatorParams init_evaluator(const WindowShape& shape, int hidden1, int hidden2, std::uint64_t seed) {
  if (hidden1 < 1 || hidden2 < 1) throw ConfigError("evaluator hidden sizes must be positive");
  EvaluatorParams p = EvaluatorParams::zeros(shape, hidden1, hidden2);
  SplitMix64 rng(mix64(seed ^ 0x5EEDULL));
  auto fill = [&](Eigen::MatrixXd& m) {
    const double sd = std::sqrt(2.0 / static_cast<double>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = sd * rng.normal();
    }
  };
  fill(p.w1);
  fill(p.w2);
  const double sd3 = std::sqrt(1.0 / hidden2);
  for (Eigen::Index i = 0; i < p.w3.size(); ++i) p.w3(i) = sd3 * rng.normal();
  return p;
}

double evaluate_features(const EvaluatorParams& params, std::span<const double> features) {
  const double c = sigmoid(forward(params, features).z3);
  return std::clamp(c, kOutputFloor, 1.0 - kOutputFloor);
}

double evaluate_capacity(const EvaluatorParams& params, const StateWindow& window) {
  if (!(window.shape == params.shape)) throw UsageError("window shape does not match the evaluator");
  return evaluate_features(params, window.features);
}

double evaluator_loss(const EvaluatorParams& params, std::span<const LabeledSample> batch) {
  if (batch.empty()) throw UsageError("evaluator_loss: empty batch");
  check_labels(batch);
  double total = 0.0;
  for (const auto& s : batch) {
    const double z = forward(params, s.features).z3;
    total += softplus(z) - s.label * z;
  }
  return total / static_cast<double>(batch.size());
}

double evaluator_loss_gradient(const EvaluatorParams& params, std::span<const LabeledSample> batch,
                               EvaluatorParams& g) {
  if (batch.empty()) throw UsageError("evaluator_loss_gradient: empty batch");
  check_labels(batch);
  g = EvaluatorParams::zeros(params.shape, params.hidden1(), params.hidden2());
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& s : batch) {
    const Activations a = forward(params, s.features);
    total += softplus(a.z3) - s.label * a.z3;
    const double d3 = (sigmoid(a.z3) - s.label) * inv_n;
    g.w3 += d3 * a.a2;
    g.b3 += d3;
    const Eigen::VectorXd d2 = (d3 * params.w3).cwiseProduct((a.z2.array() > 0.0).cast<double>().matrix());
    g.w2 += d2 * a.a1.transpose();
    g.b2 += d2;
    const Eigen::VectorXd d1 =
        (params.w2.transpose() * d2).cwiseProduct((a.z1.array() > 0.0).cast<double>().matrix());
    const Eigen::Map<const Eigen::VectorXd> x(s.features.data(), static_cast<Eigen::Index>(s.features.size()));
    g.w1 += d1 * x.transpose();
    g.b1 += d1;
  }
  return total * inv_n;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (epochs < 1 || batch_size < 1 || hidden1 < 1 || hidden2 < 1) {
    throw ConfigError("epochs, batch_size and hidden sizes must be positive");
  }
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction must lie in (0, 1)");
  }
}

TrainResult train_evaluator(std::span<const LabeledSample> dataset, const WindowShape& shape,
                            const TrainConfig& config) {
  config.validate();
  check_labels(dataset);
  const bool has0 = std::any_of(dataset.begin(), dataset.end(), [](const auto& s) { return s.label == 0; });
  const bool has1 = std::any_of(dataset.begin(), dataset.end(), [](const auto& s) { return s.label == 1; });
  if (!has0 || !has1) throw DataError("train_evaluator: dataset must contain both labels");
  for (const auto& s : dataset) {
    if (static_cast<int>(s.features.size()) != shape.feature_length()) {
      throw DataError("train_evaluator: sample feature length does not match the window shape");
    }
  }

  SplitMix64 rng(mix64(config.seed));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const auto n_val = static_cast<std::size_t>(std::floor(config.validation_fraction * dataset.size()));
  std::vector<LabeledSample> train, val;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_val ? val : train).push_back(dataset[order[i]]);
  if (train.empty()) throw DataError("train_evaluator: no training samples after the split");
  const auto& monitor = val.empty() ? train : val;

  TrainResult result;
  EvaluatorParams params = init_evaluator(shape, config.hidden1, config.hidden2, config.seed);
  std::vector<double> theta = params.flatten();
  std::vector<double> m(theta.size(), 0.0), v(theta.size(), 0.0);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  long step = 0;
  double best = INFINITY;
  result.params = params;

  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  EvaluatorParams grad;
  std::vector<LabeledSample> batch;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(config.batch_size));
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train[idx[i]]);
      epoch_loss += evaluator_loss_gradient(params, batch, grad) * static_cast<double>(batch.size());
      const std::vector<double> g = grad.flatten();
      ++step;
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      for (std::size_t k = 0; k < theta.size(); ++k) {
        m[k] = kBeta1 * m[k] + (1 - kBeta1) * g[k];
        v[k] = kBeta2 * v[k] + (1 - kBeta2) * g[k] * g[k];
        theta[k] -= config.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + kEps);
      }
      params.unflatten(theta);
    }
    result.train_loss.push_back(epoch_loss / static_cast<double>(train.size()));
    const double vl = evaluator_loss(params, monitor);
    result.validation_loss.push_back(vl);
    if (vl < best) {
      best = vl;
      result.best_epoch = epoch;
      result.params = params;
    }
  }
  return result;
}

void save_evaluator(const EvaluatorParams& params, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["kind"] = "capacity_evaluator";
  j["config"] = {{"top_m", params.shape.top_m},   {"left", params.shape.left},        {"right", params.shape.right},
                 {"hidden1", params.hidden1()}, {"hidden2", params.hidden2()}, {"activation", "relu"}};
  j["weights"] = params.flatten();
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump();
}

EvaluatorParams load_evaluator(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open evaluator file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed evaluator file " + path.string() + ": " + e.what());
  }
  if (j.value("format_version", 0) != kFormatVersion || j.value("kind", "") != "capacity_evaluator") {
    throw DataError("unsupported evaluator file " + path.string());
  }
  const auto& c = j.at("config");
  WindowShape shape{c.at("top_m").get<int>(), c.at("left").get<int>(), c.at("right").get<int>()};
  EvaluatorParams p = EvaluatorParams::zeros(shape, c.at("hidden1").get<int>(), c.at("hidden2").get<int>());
  p.unflatten(j.at("weights").get<std::vector<double>>());
  return p;
}

void save_dataset(std::span<const LabeledSample> dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& s : dataset) out << nlohmann::json{{"features", s.features}, {"label", s.label}}.dump() << '\n';
}

std::vector<LabeledSample> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  std::vector<LabeledSample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("features").get<std::vector<double>>(), j.at("label").get<int>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace capwm
