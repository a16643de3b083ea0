#pragma once

// Score components of the structured model
//
//   s(x, y) = c(x)^T y + s_g(y)  [+ s_z(y) for the sigmoid-indicator baseline]
//
// where c(x) comes from a one-hidden-layer feature network followed by a
// linear map, s_g is an input-independent one-hidden-layer network over y,
// and a separate network h(x) predicts a distribution over cardinalities
// {0, ..., Z}.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cardnet/diffgraph.hpp"

namespace cardnet {

struct Architecture {
  int features = 0;         // D
  int labels = 0;           // L
  int hidden_feature = 150; // H1
  int feature_dim = 150;    // F
  int hidden_global = 150;  // H2
  int hidden_card = 150;    // H3
  int max_card = 0;         // Z; the predictor covers {0, ..., Z}
  bool sc_weights = false;  // allocate w_1..w_Z for the indicator score

  void validate() const;
  bool operator==(const Architecture&) const = default;
};

struct Tensor {
  std::string name;
  int rows = 0;
  int cols = 1;
  std::vector<double> data;
};

/// Parameter groups, used for reporting gradient checks.
enum class ParamGroup { feature, unary, global, cardinality, indicator };
std::string_view group_name(ParamGroup g);

class ScoreModel {
 public:
  ScoreModel() = default;
  /// Glorot-uniform weights and zero biases drawn from `seed`.
  static ScoreModel initialize(const Architecture& arch, std::uint64_t seed);
  /// All-zero parameters; useful for hand-built test models.
  static ScoreModel zeros(const Architecture& arch);

  const Architecture& arch() const { return arch_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  Tensor& param(std::string_view name);
  const Tensor& param(std::string_view name) const;
  bool has_param(std::string_view name) const;
  static ParamGroup group_of(std::string_view name);

  bool operator==(const ScoreModel&) const;

 private:
  explicit ScoreModel(Architecture arch);

  Architecture arch_;
  std::vector<Tensor> params_;
};

/// Parameters of a ScoreModel recorded as leaves on a tape.
struct BoundModel {
  const ScoreModel* model = nullptr;
  std::vector<dg::Var> vars;  // same order as model->params()

  dg::Var operator[](std::string_view name) const;
  bool has(std::string_view name) const;
};

/// Records every parameter as a variable (trainable) or constant.
BoundModel bind(dg::Tape& tape, const ScoreModel& model, bool trainable);

/// Per-label unary coefficients c with s_i(x, y_i) = c_i y_i.
dg::Var unary_scores(const BoundModel& m, dg::SparseView x);

/// s_g(y) = w2^T relu(W1 y + b1) + b2.
dg::Var global_score(const BoundModel& m, dg::Var y);
/// Gradient of s_g with respect to y, as an explicit expression on the tape.
dg::Var global_score_gradient(const BoundModel& m, dg::Var y);

/// Softmax distribution of h(x) over {0, ..., Z}.
dg::Var cardinality_distribution(const BoundModel& m, dg::SparseView x);
dg::Var cardinality_log_probs(const BoundModel& m, dg::SparseView x);

enum class CardinalityMode { expected, argmax };
/// sum_k k p_k (differentiable) or the modal k (a constant node).
dg::Var cardinality_from_distribution(dg::Var probs, CardinalityMode mode);
double predict_cardinality(const ScoreModel& model, dg::SparseView x,
                           CardinalityMode mode);

/// s_z(y) = sum_{k=1..Z} w_k I_k(y) (1 - I_{k+1}(y)), I_k(y) = sigmoid(sum(y) - k).
dg::Var sc_cardinality_score(const BoundModel& m, dg::Var y);
/// Gradient of s_z with respect to y (every entry equals ds_z / d sum(y)).
dg::Var sc_cardinality_gradient(const BoundModel& m, dg::Var y);

// ---- checkpoints ----------------------------------------------------------

using Metadata = std::map<std::string, std::string>;

struct Checkpoint {
  ScoreModel model;
  Metadata metadata;
};

void write_checkpoint(std::ostream& out, const ScoreModel& model,
                      const Metadata& metadata = {});
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const ScoreModel& model,
                     const Metadata& metadata = {});
Checkpoint load_checkpoint(const std::string& path);

}  // namespace cardnet
