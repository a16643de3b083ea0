#pragma once

// Sparse multi-label datasets, the planted-cardinality synthetic generator,
// splits, and evaluation metrics.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cardnet/diffgraph.hpp"

namespace cardnet {

struct SparseVector {
  std::vector<int> index;
  std::vector<double> value;

  dg::SparseView view() const { return {index, value}; }
  std::size_t nnz() const { return index.size(); }
  bool operator==(const SparseVector&) const = default;
};

struct Example {
  SparseVector x;
  std::vector<int> labels;  // sorted, distinct

  /// Dense 0/1 target of length `num_labels`.
  std::vector<double> target(int num_labels) const;
  int cardinality() const { return static_cast<int>(labels.size()); }
  bool operator==(const Example&) const = default;
};

struct Dataset {
  std::string name;
  int features = 0;  // D
  int labels = 0;    // L
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  int max_cardinality() const;
  /// Checks index ranges, ordering and distinctness; throws on violation.
  void validate() const;
  /// Examples at the given positions, in that order.
  Dataset subset(std::span<const std::size_t> rows, std::string name) const;
  bool operator==(const Dataset&) const = default;
};

/// Loader error carrying the offending 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Reads lines of the form "l1,l2,... idx:val idx:val ..." (label list may be
/// empty). `labels`/`features` of 0 infer the dimension from the largest
/// index seen; positive values are upper bounds that indices must respect.
Dataset read_sparse_multilabel(std::istream& in, int labels, int features,
                               const std::string& source = "<stream>");
Dataset load_sparse_multilabel(const std::string& path, int labels = 0, int features = 0);
void write_sparse_multilabel(std::ostream& out, const Dataset& data);
void save_sparse_multilabel(const std::string& path, const Dataset& data);

/// Maps the number of distinct active words of an input to its label-set
/// size: the word-count range [min_words, max_words] is cut into equal bins,
/// one per cardinality in [min_card, max_card].
struct CardinalityRule {
  int min_words = 5;
  int max_words = 44;
  int min_card = 1;
  int max_card = 10;

  int operator()(int distinct_words) const;
};

struct SyntheticSpec {
  int examples = 5000;
  int labels = 30;
  int features = 100;
  CardinalityRule rule;
};

/// Random binary bags of words; the label set is the top-|y| entries of a
/// fixed random linear map applied to x, with |y| = rule(nnz(x)).
Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// ---- splits ---------------------------------------------------------------

struct SplitSpec {
  double train = 0.8;
  double dev = 0.1;
  double test = 0.1;
  std::uint64_t seed = 1;
};

struct Splits {
  Dataset train, dev, test;
};

/// Seeded shuffle followed by contiguous cuts; disjoint and covering.
Splits split_dataset(const Dataset& data, const SplitSpec& spec);
/// Explicit row selections (index files hold one 0-based row per line).
Dataset select_rows(const Dataset& data, const std::string& index_path, std::string name);
std::vector<std::size_t> read_index_file(const std::string& path);

// ---- metrics --------------------------------------------------------------

/// 2|a ∩ b| / (|a| + |b|) on 0/1 vectors; 1 when both are empty.
double example_f1(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> target);

struct F1Report {
  double example_averaged = 0.0;
  double label_macro = 0.0;
};

/// Example-averaged F1 and per-label F1 averaged over labels (both-empty
/// counts as 1 in either).
F1Report eval_f1(const std::vector<std::vector<std::uint8_t>>& predicted,
                 const std::vector<std::vector<std::uint8_t>>& targets);

struct CardinalityStats {
  double mean = 0.0;
  int min = 0;
  int max = 0;
};
CardinalityStats cardinality_stats(const Dataset& data);

struct CardinalityMse {
  double predictor = 0.0;  // mse_h
  double constant = 0.0;   // training-mean baseline
  double random = 0.0;     // uniform integers over the training range
};

CardinalityMse eval_cardinality_mse(std::span<const double> predicted,
                                    std::span<const double> targets,
                                    const CardinalityStats& train, std::uint64_t seed);

}  // namespace cardnet
