#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "capwm/capacity/capacity.hpp"

namespace capwm {

// Three fully connected layers: input -> hidden1 -> hidden2 -> 1, ReLU hidden
// activations, sigmoid output.
struct EvaluatorParams {
  WindowShape shape;
  Eigen::MatrixXd w1;  // hidden1 x input
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;  // hidden2 x hidden1
  Eigen::VectorXd b2;
  Eigen::VectorXd w3;  // hidden2
  double b3 = 0.0;

  int input_size() const { return static_cast<int>(w1.cols()); }
  int hidden1() const { return static_cast<int>(w1.rows()); }
  int hidden2() const { return static_cast<int>(w2.rows()); }

  static EvaluatorParams zeros(const WindowShape& shape, int hidden1 = 64, int hidden2 = 32);

  // w1, b1, w2, b2, w3, b3, column-major within each matrix.
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);
  std::size_t parameter_count() const;
};

// He-style random initialisation.
EvaluatorParams init_evaluator(const WindowShape& shape, int hidden1, int hidden2, std::uint64_t seed);

double evaluate_features(const EvaluatorParams& params, std::span<const double> features);
double evaluate_capacity(const EvaluatorParams& params, const StateWindow& window);

// label 1 = tolerant (high capacity), 0 = quality-critical.
struct LabeledSample {
  std::vector<double> features;
  int label = 1;
};

// Mean binary cross-entropy of the evaluator output against the labels.
double evaluator_loss(const EvaluatorParams& params, std::span<const LabeledSample> batch);

// Loss plus its gradient with respect to every parameter (same layout as params).
double evaluator_loss_gradient(const EvaluatorParams& params, std::span<const LabeledSample> batch,
                               EvaluatorParams& gradient);

struct TrainConfig {
  double learning_rate = 3e-3;
  int epochs = 40;
  int batch_size = 32;
  std::uint64_t seed = 1;
  int hidden1 = 64;
  int hidden2 = 32;
  double validation_fraction = 0.2;

  void validate() const;
};

struct TrainResult {
  EvaluatorParams params;  // from the epoch with the lowest validation loss
  std::vector<double> train_loss;
  std::vector<double> validation_loss;
  int best_epoch = 0;  // 1-based
};

// Mini-batch Adam on the cross-entropy objective. Deterministic in
// (dataset, config).
TrainResult train_evaluator(std::span<const LabeledSample> dataset, const WindowShape& shape,
                            const TrainConfig& config);

void save_evaluator(const EvaluatorParams& params, const std::filesystem::path& path);
EvaluatorParams load_evaluator(const std::filesystem::path& path);

// One JSON object per line: {"features": [...], "label": 0|1}.
void save_dataset(std::span<const LabeledSample> dataset, const std::filesystem::path& path);
std::vector<LabeledSample> load_dataset(const std::filesystem::path& path);

}  // namespace capwm
