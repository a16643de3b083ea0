#pragma once

// Unrolled inference. Every procedure produces the label trajectory
// y_0, ..., y_T on a tape so that losses on the trajectory backpropagate into
// the model parameters through all T steps.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cardnet/diffgraph.hpp"
#include "cardnet/model.hpp"

namespace cardnet {

/// Raised when inference or a loss turns non-finite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Variant {
  pc,     // projected gradient ascent onto the capped simplex
  sc,     // clipped ascent with the sigmoid-indicator cardinality score
  logit,  // unconstrained ascent on logits
  topz,   // exact top-z of the unary scores
  unary,  // y = sigmoid(c), no inference steps (MLP baseline)
};

enum class ProjectionKind { dykstra, fast };
enum class Decode { threshold, topz };

struct ZSource {
  bool fixed = false;
  double value = 0.0;  // used when fixed
};

struct InferenceConfig {
  Variant variant = Variant::pc;
  int steps = 10;           // T
  double step_size = 0.1;   // eta
  double momentum = 0.9;
  int dykstra_rounds = 2;   // R
  double sharpness = 10.0;  // tau
  ZSource z_source;
  CardinalityMode z_mode = CardinalityMode::expected;
  ProjectionKind projection = ProjectionKind::dykstra;
  int fast_iterations = 30;
  bool detach_residuals = false;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);
std::string to_string(ProjectionKind p);
ProjectionKind parse_projection(const std::string& s);
std::string to_string(Decode d);
Decode parse_decode(const std::string& s);
std::string to_string(const ZSource& z);
ZSource parse_z_source(const std::string& s);
std::string to_string(CardinalityMode m);
CardinalityMode parse_cardinality_mode(const std::string& s);

struct Trajectory {
  std::vector<dg::Var> states;  // y_0 .. y_T
  dg::Var unary;                // c(x)
  dg::Var z;                    // cardinality used for projection/decoding
  dg::Var card_log_probs;       // log h(x)
  double z_used = 0.0;
};

/// y_0 = sigmoid(c).
dg::Var init_labels(dg::Var unary);

/// Gradient of s_bar(x, y) = c^T y + s_g(y) with respect to y.
dg::Var score_gradient(const BoundModel& m, dg::Var unary, dg::Var y);

Trajectory unrolled_pgd(const BoundModel& m, dg::SparseView x, const InferenceConfig& cfg);
Trajectory unrolled_logit(const BoundModel& m, dg::SparseView x, const InferenceConfig& cfg);
Trajectory unrolled_sc(const BoundModel& m, dg::SparseView x, const InferenceConfig& cfg);
/// Dispatches on cfg.variant (topz and unary yield the single state y_0).
Trajectory run_inference(const BoundModel& m, dg::SparseView x, const InferenceConfig& cfg);

/// Ones at the z largest entries of c (ties: lower index first).
std::vector<std::uint8_t> exact_topz(std::span<const double> c, int z);

struct Prediction {
  std::vector<std::uint8_t> labels;
  std::vector<double> y;  // final relaxed state
  double z = 0.0;          // cardinality used
  double predicted_cardinality = 0.0;  // argmax of h(x)
  double residual_sum = 0.0;
  double residual_box = 0.0;
};

/// Decodes the final state of a trajectory (thresholding at 0.5 or top-z).
Prediction decode_trajectory(const Trajectory& tr, const InferenceConfig& cfg, Decode decode);

/// Runs inference on a private tape and decodes the final state.
Prediction predict(const ScoreModel& model, dg::SparseView x, const InferenceConfig& cfg,
                   Decode decode);

/// Value-level replay of projected ascent that uses the exact capped
/// projection in place of the soft Dykstra layer.
std::vector<std::vector<double>> replay_pgd_exact(const ScoreModel& model, dg::SparseView x,
                                                  const InferenceConfig& cfg);
/// s_bar(x, y) evaluated on plain buffers.
double score_value(const ScoreModel& model, dg::SparseView x, std::span<const double> y);

}  // namespace cardnet
