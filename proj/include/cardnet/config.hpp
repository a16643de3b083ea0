#pragma once

// Declarative run configuration: a flat "key = value" file. Lines starting
// with '#' are comments. Unknown keys and malformed values are errors that
// name the offending key.

#include <cstdint>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include "cardnet/data.hpp"
#include "cardnet/inference.hpp"
#include "cardnet/model.hpp"
#include "cardnet/training.hpp"

namespace cardnet {

/// Raised for invalid configuration; `field()` is the offending key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& what);
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct DataConfig {
  bool synthetic = false;
  std::string train, dev, test;
  std::string train_index, dev_index;
  int labels = 0;    // 0 infers from the training file
  int features = 0;  // 0 infers from the training file
  double dev_fraction = 0.1;
  double test_fraction = 0.1;
};

struct ModelConfig {
  int hidden_feature = 150;
  int feature_dim = 150;
  int hidden_global = 150;
  int hidden_card = 150;
  int max_card = 0;  // 0 uses the largest label set in the training split
};

struct GradcheckConfig {
  int example = 0;
  double step = 1e-5;
  double kink_tolerance = 1e-3;
  double threshold = 1e-2;
  bool corrupt_backward = false;
};

struct RunConfig {
  std::uint64_t seed = 1;
  DataConfig data;
  SyntheticSpec synthetic;
  ModelConfig model;
  InferenceConfig inference;
  Decode decode = Decode::threshold;
  LossConfig loss;
  TrainOptions optim;  // seed and decode are mirrored from the fields above
  std::string checkpoint;
  std::string metrics;
  GradcheckConfig gradcheck;

  /// Applies one "key=value" assignment.
  void set(const std::string& key, const std::string& value);
  /// Checks every field; throws ConfigError naming the first bad one.
  void validate() const;
  /// Sorted "key = value" lines with every default materialized.
  std::string serialize() const;

  static std::vector<std::string> keys();
};

RunConfig parse_config(std::istream& in, const std::string& source = "<config>");
RunConfig load_config(const std::string& path);
/// Applies "key=value" overrides in order.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments);

struct RunData {
  Dataset train;
  std::optional<Dataset> dev;
  std::optional<Dataset> test;
};

/// Generates or loads the datasets named by the config.
RunData load_run_data(const RunConfig& cfg);

/// Model shape for the given training data.
Architecture architecture_for(const RunConfig& cfg, const Dataset& train);

}  // namespace cardnet
