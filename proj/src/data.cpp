#include "cardnet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace cardnet {

std::vector<double> Example::target(int num_labels) const {
  std::vector<double> t(num_labels, 0.0);
  for (int l : labels) t[l] = 1.0;
  return t;
}

int Dataset::max_cardinality() const {
  int m = 0;
  for (const Example& e : examples) m = std::max(m, e.cardinality());
  return m;
}

void Dataset::validate() const {
  for (std::size_t n = 0; n < examples.size(); ++n) {
    const Example& e = examples[n];
    auto bad = [&](const std::string& what) {
      throw std::invalid_argument("dataset " + name + ", example " + std::to_string(n) +
                                  ": " + what);
    };
    for (std::size_t k = 0; k < e.labels.size(); ++k) {
      if (e.labels[k] < 0 || e.labels[k] >= labels) bad("label index out of range");
      if (k > 0 && e.labels[k] <= e.labels[k - 1]) bad("labels not sorted/distinct");
    }
    if (e.x.index.size() != e.x.value.size()) bad("feature index/value mismatch");
    for (std::size_t k = 0; k < e.x.index.size(); ++k) {
      if (e.x.index[k] < 0 || e.x.index[k] >= features) bad("feature index out of range");
      if (k > 0 && e.x.index[k] <= e.x.index[k - 1]) bad("features not sorted/distinct");
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> rows, std::string new_name) const {
  Dataset d{std::move(new_name), features, labels, {}};
  d.examples.reserve(rows.size());
  for (std::size_t r : rows) {
    if (r >= examples.size()) {
      throw std::out_of_range("row " + std::to_string(r) + " outside dataset " + name +
                              " of size " + std::to_string(examples.size()));
    }
    d.examples.push_back(examples[r]);
  }
  return d;
}

// ---- parsing --------------------------------------------------------------

ParseError::ParseError(const std::string& source, std::size_t line, const std::string& what)
    : std::runtime_error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

namespace {

int parse_int(std::string_view s, const std::string& source, std::size_t line,
              const char* what) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ParseError(source, line, std::string("bad ") + what + " '" + std::string(s) + "'");
  }
  return v;
}

double parse_real(std::string_view s, const std::string& source, std::size_t line) {
  std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (tmp.empty() || end != tmp.c_str() + tmp.size() || !std::isfinite(v)) {
    throw ParseError(source, line, "bad feature value '" + tmp + "'");
  }
  return v;
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

Dataset read_sparse_multilabel(std::istream& in, int labels, int features,
                               const std::string& source) {
  Dataset d;
  d.name = source;
  int max_label = -1, max_feature = -1;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    Example e;
    std::istringstream tokens(line);
    std::string tok;
    bool first = true;
    const bool leading_space = !line.empty() && (line[0] == ' ' || line[0] == '\t');
    while (tokens >> tok) {
      const bool is_feature = tok.find(':') != std::string::npos;
      if (first && !leading_space && !is_feature) {
        std::string_view rest(tok);
        while (!rest.empty()) {
          const auto comma = rest.find(',');
          const int l = parse_int(rest.substr(0, comma), source, lineno, "label");
          if (l < 0) throw ParseError(source, lineno, "negative label index");
          if (labels > 0 && l >= labels) {
            throw ParseError(source, lineno, "label index " + std::to_string(l) +
                                                 " exceeds label count " + std::to_string(labels));
          }
          e.labels.push_back(l);
          if (comma == std::string_view::npos) break;
          rest.remove_prefix(comma + 1);
          if (rest.empty()) throw ParseError(source, lineno, "trailing comma in label list");
        }
      } else {
        if (!is_feature) throw ParseError(source, lineno, "expected idx:val, got '" + tok + "'");
        const auto colon = tok.find(':');
        const std::string_view sv(tok);
        const int j = parse_int(sv.substr(0, colon), source, lineno, "feature index");
        if (j < 0) throw ParseError(source, lineno, "negative feature index");
        if (features > 0 && j >= features) {
          throw ParseError(source, lineno, "feature index " + std::to_string(j) +
                                               " exceeds feature count " + std::to_string(features));
        }
        e.x.index.push_back(j);
        e.x.value.push_back(parse_real(sv.substr(colon + 1), source, lineno));
      }
      first = false;
    }

    std::sort(e.labels.begin(), e.labels.end());
    if (std::adjacent_find(e.labels.begin(), e.labels.end()) != e.labels.end()) {
      throw ParseError(source, lineno, "duplicate label index");
    }
    std::vector<std::size_t> order(e.x.index.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&e](std::size_t a, std::size_t b) { return e.x.index[a] < e.x.index[b]; });
    SparseVector sorted;
    for (std::size_t k : order) {
      if (!sorted.index.empty() && sorted.index.back() == e.x.index[k]) {
        throw ParseError(source, lineno, "duplicate feature index " + std::to_string(e.x.index[k]));
      }
      sorted.index.push_back(e.x.index[k]);
      sorted.value.push_back(e.x.value[k]);
    }
    e.x = std::move(sorted);
    if (!e.labels.empty()) max_label = std::max(max_label, e.labels.back());
    if (!e.x.index.empty()) max_feature = std::max(max_feature, e.x.index.back());
    d.examples.push_back(std::move(e));
  }
  d.labels = labels > 0 ? labels : max_label + 1;
  d.features = features > 0 ? features : max_feature + 1;
  return d;
}

Dataset load_sparse_multilabel(const std::string& path, int labels, int features) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  return read_sparse_multilabel(in, labels, features, path);
}

void write_sparse_multilabel(std::ostream& out, const Dataset& data) {
  for (const Example& e : data.examples) {
    for (std::size_t k = 0; k < e.labels.size(); ++k) {
      if (k > 0) out << ',';
      out << e.labels[k];
    }
    for (std::size_t k = 0; k < e.x.index.size(); ++k) {
      out << ' ' << e.x.index[k] << ':' << format_double(e.x.value[k]);
    }
    out << '\n';
  }
}

void save_sparse_multilabel(const std::string& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset " + path);
  write_sparse_multilabel(out, data);
}

// ---- synthetic ------------------------------------------------------------

int CardinalityRule::operator()(int distinct_words) const {
  const int bins = max_card - min_card + 1;
  const int span = max_words - min_words + 1;
  const int w = std::clamp(distinct_words, min_words, max_words) - min_words;
  return min_card + std::min(bins - 1, w * bins / span);
}

Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  const CardinalityRule& rule = spec.rule;
  if (spec.labels < 1 || spec.features < 1 || spec.examples < 0) {
    throw std::invalid_argument("synthetic: dimensions must be positive");
  }
  if (rule.min_card < 0 || rule.min_card > rule.max_card) {
    throw std::invalid_argument("synthetic: bad cardinality range");
  }
  if (rule.max_card > spec.labels) {
    throw std::invalid_argument("synthetic: cardinality " + std::to_string(rule.max_card) +
                                " exceeds label count " + std::to_string(spec.labels));
  }
  if (rule.min_words < 1 || rule.min_words > rule.max_words || rule.max_words > spec.features) {
    throw std::invalid_argument("synthetic: bad word-count range");
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> map(static_cast<std::size_t>(spec.labels) * spec.features);
  for (double& a : map) a = normal(rng);
  // Standardize each row so every label has the same marginal score
  // distribution under random bags (and hence roughly equal frequency).
  for (int l = 0; l < spec.labels; ++l) {
    double* row = map.data() + static_cast<std::size_t>(l) * spec.features;
    double mean = 0.0, sq = 0.0;
    for (int j = 0; j < spec.features; ++j) mean += row[j];
    mean /= spec.features;
    for (int j = 0; j < spec.features; ++j) sq += (row[j] - mean) * (row[j] - mean);
    const double sd = spec.features > 1 ? std::sqrt(sq / spec.features) : 1.0;
    for (int j = 0; j < spec.features; ++j) row[j] = sd > 0.0 ? (row[j] - mean) / sd : 0.0;
  }

  std::uniform_int_distribution<int> word_count(rule.min_words, rule.max_words);
  std::vector<int> vocab(spec.features);
  std::iota(vocab.begin(), vocab.end(), 0);

  Dataset d{"synthetic", spec.features, spec.labels, {}};
  d.examples.reserve(spec.examples);
  std::vector<double> score(spec.labels);
  std::vector<int> order(spec.labels);
  for (int n = 0; n < spec.examples; ++n) {
    const int words = word_count(rng);
    for (int k = 0; k < words; ++k) {
      std::uniform_int_distribution<int> pick(k, spec.features - 1);
      std::swap(vocab[k], vocab[pick(rng)]);
    }
    Example e;
    e.x.index.assign(vocab.begin(), vocab.begin() + words);
    std::sort(e.x.index.begin(), e.x.index.end());
    e.x.value.assign(words, 1.0);

    for (int l = 0; l < spec.labels; ++l) {
      double s = 0.0;
      const double* row = map.data() + static_cast<std::size_t>(l) * spec.features;
      for (int j : e.x.index) s += row[j];
      score[l] = s;
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&score](int a, int b) { return score[a] > score[b]; });
    const int card = rule(words);
    e.labels.assign(order.begin(), order.begin() + card);
    std::sort(e.labels.begin(), e.labels.end());
    d.examples.push_back(std::move(e));
  }
  return d;
}

// ---- splits ---------------------------------------------------------------

Splits split_dataset(const Dataset& data, const SplitSpec& spec) {
  for (double f : {spec.train, spec.dev, spec.test}) {
    if (!(f >= 0.0)) throw std::invalid_argument("split: negative fraction");
  }
  if (std::abs(spec.train + spec.dev + spec.test - 1.0) > 1e-9) {
    throw std::invalid_argument("split: fractions must sum to 1");
  }
  const std::size_t n = data.size();
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  const std::size_t n_train = static_cast<std::size_t>(std::llround(spec.train * n));
  const std::size_t n_dev = std::min(n - n_train, static_cast<std::size_t>(std::llround(spec.dev * n)));
  std::span<const std::size_t> all(rows);
  return Splits{data.subset(all.subspan(0, n_train), data.name + "/train"),
                data.subset(all.subspan(n_train, n_dev), data.name + "/dev"),
                data.subset(all.subspan(n_train + n_dev), data.name + "/test")};
}

std::vector<std::size_t> read_index_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open index file " + path);
  std::vector<std::size_t> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    const int v = parse_int(std::string_view(line).substr(b, e - b + 1), path, lineno, "row index");
    if (v < 0) throw ParseError(path, lineno, "negative row index");
    rows.push_back(static_cast<std::size_t>(v));
  }
  return rows;
}

Dataset select_rows(const Dataset& data, const std::string& index_path, std::string name) {
  const auto rows = read_index_file(index_path);
  return data.subset(rows, std::move(name));
}

// ---- metrics --------------------------------------------------------------

double example_f1(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> target) {
  if (predicted.size() != target.size()) {
    throw std::invalid_argument("example_f1: length mismatch");
  }
  int both = 0, np = 0, nt = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    np += predicted[i] != 0;
    nt += target[i] != 0;
    both += predicted[i] != 0 && target[i] != 0;
  }
  if (np + nt == 0) return 1.0;
  return 2.0 * both / (np + nt);
}

F1Report eval_f1(const std::vector<std::vector<std::uint8_t>>& predicted,
                 const std::vector<std::vector<std::uint8_t>>& targets) {
  if (predicted.size() != targets.size()) {
    throw std::invalid_argument("eval_f1: prediction/target count mismatch");
  }
  F1Report r;
  if (predicted.empty()) return r;
  const std::size_t L = targets.front().size();
  std::vector<int> tp(L, 0), fp(L, 0), fn(L, 0);
  double acc = 0.0;
  for (std::size_t n = 0; n < predicted.size(); ++n) {
    if (predicted[n].size() != L || targets[n].size() != L) {
      throw std::invalid_argument("eval_f1: label-vector length mismatch");
    }
    acc += example_f1(predicted[n], targets[n]);
    for (std::size_t l = 0; l < L; ++l) {
      const bool p = predicted[n][l] != 0, t = targets[n][l] != 0;
      tp[l] += p && t;
      fp[l] += p && !t;
      fn[l] += !p && t;
    }
  }
  r.example_averaged = acc / predicted.size();
  double macro = 0.0;
  for (std::size_t l = 0; l < L; ++l) {
    const int denom = 2 * tp[l] + fp[l] + fn[l];
    macro += denom == 0 ? 1.0 : 2.0 * tp[l] / denom;
  }
  r.label_macro = L == 0 ? 0.0 : macro / L;
  return r;
}

CardinalityStats cardinality_stats(const Dataset& data) {
  CardinalityStats s;
  if (data.examples.empty()) return s;
  s.min = data.examples.front().cardinality();
  s.max = s.min;
  double acc = 0.0;
  for (const Example& e : data.examples) {
    acc += e.cardinality();
    s.min = std::min(s.min, e.cardinality());
    s.max = std::max(s.max, e.cardinality());
  }
  s.mean = acc / data.examples.size();
  return s;
}

CardinalityMse eval_cardinality_mse(std::span<const double> predicted,
                                    std::span<const double> targets,
                                    const CardinalityStats& train, std::uint64_t seed) {
  if (predicted.size() != targets.size()) {
    throw std::invalid_argument("eval_cardinality_mse: length mismatch");
  }
  CardinalityMse r;
  if (targets.empty()) return r;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> draw(train.min, train.max);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double t = targets[i];
    r.predictor += (predicted[i] - t) * (predicted[i] - t);
    r.constant += (train.mean - t) * (train.mean - t);
    const double g = draw(rng);
    r.random += (g - t) * (g - t);
  }
  const double n = static_cast<double>(targets.size());
  r.predictor /= n;
  r.constant /= n;
  r.random /= n;
  return r;
}

}  // namespace cardnet
