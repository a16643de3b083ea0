#include "cardnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace cardnet {

namespace {

constexpr const char* kCheckpointMagic = "cardnet-checkpoint";
constexpr int kCheckpointVersion = 1;

void require_positive(int v, const char* field) {
  if (v < 1) {
    throw std::invalid_argument(std::string("architecture: ") + field +
                                " must be >= 1, got " + std::to_string(v));
  }
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

void Architecture::validate() const {
  require_positive(features, "features");
  require_positive(labels, "labels");
  require_positive(hidden_feature, "hidden_feature");
  require_positive(feature_dim, "feature_dim");
  require_positive(hidden_global, "hidden_global");
  require_positive(hidden_card, "hidden_card");
  if (max_card < 1 || max_card > labels) {
    throw std::invalid_argument("architecture: max_card must lie in [1, labels], got " +
                                std::to_string(max_card));
  }
}

std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::feature: return "feature";
    case ParamGroup::unary: return "unary";
    case ParamGroup::global: return "global";
    case ParamGroup::cardinality: return "cardinality";
    case ParamGroup::indicator: return "indicator";
  }
  return "?";
}

ScoreModel::ScoreModel(Architecture arch) : arch_(arch) {
  arch_.validate();
  const auto& a = arch_;
  auto add = [this](std::string name, int rows, int cols) {
    params_.push_back(Tensor{std::move(name), rows, cols,
                             std::vector<double>(static_cast<std::size_t>(rows) * cols, 0.0)});
  };
  add("f_w1", a.hidden_feature, a.features);
  add("f_b1", a.hidden_feature, 1);
  add("f_w2", a.feature_dim, a.hidden_feature);
  add("f_b2", a.feature_dim, 1);
  add("u_w", a.labels, a.feature_dim);
  add("u_b", a.labels, 1);
  add("g_w1", a.hidden_global, a.labels);
  add("g_b1", a.hidden_global, 1);
  add("g_w2", a.hidden_global, 1);
  add("g_b2", 1, 1);
  add("h_w1", a.hidden_card, a.features);
  add("h_b1", a.hidden_card, 1);
  add("h_w2", a.max_card + 1, a.hidden_card);
  add("h_b2", a.max_card + 1, 1);
  if (a.sc_weights) add("sc_w", a.max_card, 1);
}

ScoreModel ScoreModel::zeros(const Architecture& arch) { return ScoreModel(arch); }

ScoreModel ScoreModel::initialize(const Architecture& arch, std::uint64_t seed) {
  ScoreModel m(arch);
  std::mt19937_64 rng(seed);
  for (Tensor& t : m.params_) {
    // Weights are the matrices; g_w2 is stored as a column but acts as the
    // 1 x H2 output layer.
    const bool weight = t.name.find("_w") != std::string::npos && t.name != "sc_w";
    if (!weight) continue;
    const int fan_out = t.name == "g_w2" ? 1 : t.rows;
    const int fan_in = t.name == "g_w2" ? t.rows : t.cols;
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& x : t.data) x = dist(rng);
  }
  return m;
}

Tensor& ScoreModel::param(std::string_view name) {
  for (Tensor& t : params_) {
    if (t.name == name) return t;
  }
  throw std::out_of_range("model has no parameter '" + std::string(name) + "'");
}

const Tensor& ScoreModel::param(std::string_view name) const {
  return const_cast<ScoreModel*>(this)->param(name);
}

bool ScoreModel::has_param(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [name](const Tensor& t) { return t.name == name; });
}

ParamGroup ScoreModel::group_of(std::string_view name) {
  switch (name.front()) {
    case 'f': return ParamGroup::feature;
    case 'u': return ParamGroup::unary;
    case 'g': return ParamGroup::global;
    case 'h': return ParamGroup::cardinality;
    default: return ParamGroup::indicator;
  }
}

bool ScoreModel::operator==(const ScoreModel& other) const {
  if (!(arch_ == other.arch_) || params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor& a = params_[i];
    const Tensor& b = other.params_[i];
    if (a.name != b.name || a.rows != b.rows || a.cols != b.cols || a.data != b.data) {
      return false;
    }
  }
  return true;
}

// ---- tape binding ---------------------------------------------------------

dg::Var BoundModel::operator[](std::string_view name) const {
  const auto& ps = model->params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps[i].name == name) return vars[i];
  }
  throw std::out_of_range("model has no parameter '" + std::string(name) + "'");
}

bool BoundModel::has(std::string_view name) const { return model->has_param(name); }

BoundModel bind(dg::Tape& tape, const ScoreModel& model, bool trainable) {
  BoundModel b;
  b.model = &model;
  b.vars.reserve(model.params().size());
  for (const Tensor& t : model.params()) {
    b.vars.push_back(trainable ? tape.variable(t.rows, t.cols, t.data)
                               : tape.constant(t.rows, t.cols, t.data));
  }
  return b;
}

dg::Var unary_scores(const BoundModel& m, dg::SparseView x) {
  using namespace dg;
  Var hidden = relu(add(sparse_matvec(m["f_w1"], x), m["f_b1"]));
  Var feature = add(matvec(m["f_w2"], hidden), m["f_b2"]);
  return add(matvec(m["u_w"], feature), m["u_b"]);
}

dg::Var global_score(const BoundModel& m, dg::Var y) {
  using namespace dg;
  Var pre = add(matvec(m["g_w1"], y), m["g_b1"]);
  return add(dot(m["g_w2"], relu(pre)), m["g_b2"]);
}

dg::Var global_score_gradient(const BoundModel& m, dg::Var y) {
  using namespace dg;
  Var pre = add(matvec(m["g_w1"], y), m["g_b1"]);
  return matvec_t(m["g_w1"], mul(step(pre), m["g_w2"]));
}

dg::Var cardinality_log_probs(const BoundModel& m, dg::SparseView x) {
  using namespace dg;
  Var hidden = relu(add(sparse_matvec(m["h_w1"], x), m["h_b1"]));
  return log_softmax(add(matvec(m["h_w2"], hidden), m["h_b2"]));
}

dg::Var cardinality_distribution(const BoundModel& m, dg::SparseView x) {
  using namespace dg;
  Var hidden = relu(add(sparse_matvec(m["h_w1"], x), m["h_b1"]));
  return softmax(add(matvec(m["h_w2"], hidden), m["h_b2"]));
}

dg::Var cardinality_from_distribution(dg::Var probs, CardinalityMode mode) {
  auto p = probs.value();
  if (mode == CardinalityMode::argmax) {
    const auto it = std::max_element(p.begin(), p.end());
    return probs.tape().scalar(static_cast<double>(it - p.begin()));
  }
  std::vector<double> k(p.size());
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = static_cast<double>(i);
  return dg::dot(probs, probs.tape().constant(std::move(k)));
}

double predict_cardinality(const ScoreModel& model, dg::SparseView x,
                           CardinalityMode mode) {
  dg::Tape tape;
  BoundModel m = bind(tape, model, false);
  return cardinality_from_distribution(cardinality_distribution(m, x), mode).scalar();
}

namespace {

// I_k(y) for k = 1..Z+1.
dg::Var bucket_indicators(dg::Var y, int max_card) {
  using namespace dg;
  std::vector<double> k(max_card + 1);
  for (int i = 0; i <= max_card; ++i) k[i] = i + 1;
  Tape& tape = y.tape();
  return sigmoid(sub(broadcast(sum(y), max_card + 1), tape.constant(std::move(k))));
}

void require_indicator_weights(const BoundModel& m) {
  if (!m.has("sc_w")) {
    throw std::invalid_argument("indicator cardinality score needs sc_weights in the model");
  }
}

}  // namespace

dg::Var sc_cardinality_score(const BoundModel& m, dg::Var y) {
  using namespace dg;
  require_indicator_weights(m);
  const int z = m.model->arch().max_card;
  Var ind = bucket_indicators(y, z);
  Var lower = slice(ind, 0, z);  // I_k
  Var upper = slice(ind, 1, z);  // I_{k+1}
  return dot(m["sc_w"], mul(lower, shift(-upper, 1.0)));
}

dg::Var sc_cardinality_gradient(const BoundModel& m, dg::Var y) {
  using namespace dg;
  require_indicator_weights(m);
  const int z = m.model->arch().max_card;
  Var ind = bucket_indicators(y, z);
  Var lower = slice(ind, 0, z);
  Var upper = slice(ind, 1, z);
  Var not_upper = shift(-upper, 1.0);
  Var d_lower = mul(lower, shift(-lower, 1.0));
  Var d_upper = mul(upper, not_upper);
  Var d_sum = dot(m["sc_w"], sub(mul(d_lower, not_upper), mul(lower, d_upper)));
  return broadcast(d_sum, static_cast<int>(y.size()));
}

// ---- checkpoints ----------------------------------------------------------

void write_checkpoint(std::ostream& out, const ScoreModel& model, const Metadata& metadata) {
  const Architecture& a = model.arch();
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  out << "arch features=" << a.features << " labels=" << a.labels
      << " hidden_feature=" << a.hidden_feature << " feature_dim=" << a.feature_dim
      << " hidden_global=" << a.hidden_global << " hidden_card=" << a.hidden_card
      << " max_card=" << a.max_card << " sc_weights=" << (a.sc_weights ? 1 : 0) << '\n';
  for (const auto& [k, v] : metadata) {
    if (k.find_first_of(" \t\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint metadata key/value not representable: " + k);
    }
    out << "meta " << k << ' ' << v << '\n';
  }
  for (const Tensor& t : model.params()) {
    out << "tensor " << t.name << ' ' << t.rows << ' ' << t.cols << '\n';
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      out << format_double(t.data[i]) << ((i + 1) % 8 == 0 || i + 1 == t.data.size() ? '\n' : ' ');
    }
  }
  out << "end\n";
}

Checkpoint read_checkpoint(std::istream& in) {
  auto fail = [](const std::string& what) -> void {
    throw std::runtime_error("checkpoint: " + what);
  };
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != kCheckpointMagic) fail("missing header");
  if (version != kCheckpointVersion) fail("unsupported version " + std::to_string(version));

  std::string word;
  if (!(in >> word) || word != "arch") fail("missing arch line");
  std::string line;
  std::getline(in, line);
  Architecture a;
  std::istringstream arch_line(line);
  std::string kv;
  while (arch_line >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail("bad arch field '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const int val = std::stoi(kv.substr(eq + 1));
    if (key == "features") a.features = val;
    else if (key == "labels") a.labels = val;
    else if (key == "hidden_feature") a.hidden_feature = val;
    else if (key == "feature_dim") a.feature_dim = val;
    else if (key == "hidden_global") a.hidden_global = val;
    else if (key == "hidden_card") a.hidden_card = val;
    else if (key == "max_card") a.max_card = val;
    else if (key == "sc_weights") a.sc_weights = val != 0;
    else fail("unknown arch field '" + key + "'");
  }

  Checkpoint ck{ScoreModel::zeros(a), {}};
  std::size_t next_tensor = 0;
  while (in >> word) {
    if (word == "end") {
      if (next_tensor != ck.model.params().size()) fail("missing tensors");
      return ck;
    }
    if (word == "meta") {
      std::string key, value;
      in >> key;
      std::getline(in, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      ck.metadata[key] = value;
    } else if (word == "tensor") {
      std::string name;
      int rows = 0, cols = 0;
      if (!(in >> name >> rows >> cols)) fail("bad tensor header");
      if (next_tensor >= ck.model.params().size()) fail("unexpected tensor " + name);
      Tensor& t = ck.model.params()[next_tensor++];
      if (t.name != name || t.rows != rows || t.cols != cols) {
        fail("tensor " + name + " does not match the architecture (expected " + t.name + ")");
      }
      for (double& x : t.data) {
        std::string tok;
        if (!(in >> tok)) fail("truncated tensor " + name);
        x = std::stod(tok);
      }
    } else {
      fail("unexpected token '" + word + "'");
    }
  }
  fail("missing end marker");
  return ck;
}

void save_checkpoint(const std::string& path, const ScoreModel& model, const Metadata& metadata) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  write_checkpoint(out, model, metadata);
  if (!out) throw std::runtime_error("error writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

}  // namespace cardnet
