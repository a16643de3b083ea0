#pragma once

// Losses, AdaGrad, the training loop and finite-difference gradient checks.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cardnet/data.hpp"
#include "cardnet/diffgraph.hpp"
#include "cardnet/inference.hpp"
#include "cardnet/model.hpp"

namespace cardnet {

enum class SingleStepLoss { soft_f1, cross_entropy };
std::string to_string(SingleStepLoss l);
SingleStepLoss parse_single_step_loss(const std::string& s);

struct LossConfig {
  SingleStepLoss single_step = SingleStepLoss::soft_f1;
  double aux_cardinality_weight = 1.0;

  void validate() const;
};

/// -2 y^T y* / sum_i (y_i + y*_i); 0 when the denominator vanishes.
double soft_f1_loss(std::span<const double> y, std::span<const double> target);
dg::Var soft_f1_loss(dg::Var y, std::span<const double> target);

/// Mean binary cross-entropy of y (clamped away from 0 and 1) against y*.
dg::Var cross_entropy_loss(dg::Var y, std::span<const double> target);

dg::Var single_step_loss(dg::Var y, std::span<const double> target, SingleStepLoss kind);

/// (1/T) sum_{t=1..T} l(y_t, y*) / (T - t + 1) over states y_0..y_T. A
/// trajectory holding only y_0 is scored by l(y_0, y*).
dg::Var weighted_trajectory_loss(std::span<const dg::Var> states,
                                 std::span<const double> target, SingleStepLoss kind);
double weighted_trajectory_loss(std::span<const double> step_losses);

class AdaGrad {
 public:
  explicit AdaGrad(double learning_rate, double epsilon = 1e-8)
      : lr_(learning_rate), eps_(epsilon) {}

  /// theta <- theta - lr * g / (sqrt(G + g^2) + eps), G <- G + g^2.
  void step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads);
  const std::vector<std::vector<double>>& accumulators() const { return accum_; }
  double learning_rate() const { return lr_; }

 private:
  double lr_;
  double eps_;
  std::vector<std::vector<double>> accum_;
};

struct ExampleLoss {
  double total = 0.0;
  double trajectory = 0.0;
  double cardinality = 0.0;
};

/// Forward + backward for one example; adds the parameter gradients into
/// `grads` (one buffer per model tensor).
ExampleLoss accumulate_example_gradient(const ScoreModel& model, const Example& ex,
                                        const InferenceConfig& inference,
                                        const LossConfig& loss,
                                        std::vector<std::vector<double>>& grads);
/// Same loss, forward only.
ExampleLoss example_loss(const ScoreModel& model, const Example& ex,
                         const InferenceConfig& inference, const LossConfig& loss);

// ---- evaluation -------------------------------------------------------------

struct EvalReport {
  F1Report f1;
  CardinalityMse card;
  double loss = 0.0;
  double mean_residual_sum = 0.0;
  double max_residual_box = 0.0;
};

/// Decodes every example with argmax-mode cardinalities.
EvalReport evaluate(const ScoreModel& model, const Dataset& data, InferenceConfig inference,
                    const LossConfig& loss, Decode decode, const CardinalityStats& train_stats,
                    std::uint64_t seed);

// ---- training loop ----------------------------------------------------------

struct MetricsRecord {
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  double f1 = 0.0;
  double f1_macro = 0.0;
  double card_mse = 0.0;

  /// "epoch=<n>\tsplit=<s>\tloss=<x>\tf1=<x>\tf1_macro=<x>\tcard_mse=<x>"
  std::string to_line() const;
  static MetricsRecord parse(const std::string& line);
};

struct TrainOptions {
  int epochs = 20;
  int batch_size = 32;
  int patience = 10;
  double learning_rate = 0.1;
  std::uint64_t seed = 1;
  Decode decode = Decode::threshold;
  bool log_train_metrics = true;
};

struct TrainResult {
  ScoreModel model;  // best dev-F1 snapshot (or final when there is no dev split)
  std::vector<MetricsRecord> log;
  int best_epoch = 0;
};

TrainResult train(const Dataset& train_set, const Dataset* dev_set, ScoreModel model,
                  const InferenceConfig& inference, const LossConfig& loss,
                  const TrainOptions& options,
                  const std::function<void(const MetricsRecord&)>& on_record = {});

/// Fits only the cardinality network h(x) with cross-entropy against |y*|.
ScoreModel train_cardinality_predictor(const Dataset& train_set, ScoreModel model, int epochs,
                                       int batch_size, double learning_rate, std::uint64_t seed);

// ---- gradient checks -------------------------------------------------------

struct GradcheckOptions {
  double step = 1e-5;
  /// Coordinates whose one-sided differences disagree by more than this
  /// (relative) straddle a kink and are skipped.
  double kink_tolerance = 1e-3;
  bool corrupt_backward = false;
};

struct GroupError {
  ParamGroup group;
  double max_rel_error = 0.0;
  int checked = 0;
  int skipped = 0;
};

struct GradcheckReport {
  std::vector<GroupError> groups;
  double max_rel_error = 0.0;
};

/// Compares backward gradients of the example loss against central finite
/// differences, coordinate by coordinate. The error of a group is
/// max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|).
GradcheckReport gradcheck(const ScoreModel& model, const Example& ex,
                          const InferenceConfig& inference, const LossConfig& loss,
                          const GradcheckOptions& options = {});

}  // namespace cardnet
