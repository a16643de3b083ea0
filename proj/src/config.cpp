#include "cardnet/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace cardnet {

ConfigError::ConfigError(std::string field, const std::string& what)
    : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError(key, "expected an integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  if (v.empty()) throw ConfigError(key, "expected a number, got ''");
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size()) throw ConfigError(key, "expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt(bool b) { return b ? "true" : "false"; }

template <class F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key, e.what());
  }
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

#define CARDNET_INT(member)                                                       \
  Field {                                                                         \
    [](const RunConfig& c) { return std::to_string(c.member); },                  \
        [](RunConfig& c, const std::string& k, const std::string& v) {            \
          c.member = parse_int<std::decay_t<decltype(c.member)>>(k, v);           \
        }                                                                         \
  }
#define CARDNET_REAL(member)                                                      \
  Field {                                                                         \
    [](const RunConfig& c) { return fmt(c.member); },                             \
        [](RunConfig& c, const std::string& k, const std::string& v) {            \
          c.member = parse_real(k, v);                                            \
        }                                                                         \
  }
#define CARDNET_BOOL(member)                                                      \
  Field {                                                                         \
    [](const RunConfig& c) { return fmt(c.member); },                             \
        [](RunConfig& c, const std::string& k, const std::string& v) {            \
          c.member = parse_bool(k, v);                                            \
        }                                                                         \
  }
#define CARDNET_STRING(member)                                                    \
  Field {                                                                         \
    [](const RunConfig& c) { return c.member; },                                  \
        [](RunConfig& c, const std::string&, const std::string& v) { c.member = v; } \
  }
#define CARDNET_ENUM(member, parse)                                               \
  Field {                                                                         \
    [](const RunConfig& c) { return to_string(c.member); },                       \
        [](RunConfig& c, const std::string& k, const std::string& v) {            \
          c.member = wrap(k, [&] { return parse(v); });                           \
        }                                                                         \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"seed", CARDNET_INT(seed)},
      {"data.synthetic", CARDNET_BOOL(data.synthetic)},
      {"data.train", CARDNET_STRING(data.train)},
      {"data.dev", CARDNET_STRING(data.dev)},
      {"data.test", CARDNET_STRING(data.test)},
      {"data.train_index", CARDNET_STRING(data.train_index)},
      {"data.dev_index", CARDNET_STRING(data.dev_index)},
      {"data.labels", CARDNET_INT(data.labels)},
      {"data.features", CARDNET_INT(data.features)},
      {"data.dev_fraction", CARDNET_REAL(data.dev_fraction)},
      {"data.test_fraction", CARDNET_REAL(data.test_fraction)},
      {"synthetic.examples", CARDNET_INT(synthetic.examples)},
      {"synthetic.labels", CARDNET_INT(synthetic.labels)},
      {"synthetic.features", CARDNET_INT(synthetic.features)},
      {"synthetic.min_words", CARDNET_INT(synthetic.rule.min_words)},
      {"synthetic.max_words", CARDNET_INT(synthetic.rule.max_words)},
      {"synthetic.min_card", CARDNET_INT(synthetic.rule.min_card)},
      {"synthetic.max_card", CARDNET_INT(synthetic.rule.max_card)},
      {"model.hidden_feature", CARDNET_INT(model.hidden_feature)},
      {"model.feature_dim", CARDNET_INT(model.feature_dim)},
      {"model.hidden_global", CARDNET_INT(model.hidden_global)},
      {"model.hidden_card", CARDNET_INT(model.hidden_card)},
      {"model.max_card", CARDNET_INT(model.max_card)},
      {"inference.variant", CARDNET_ENUM(inference.variant, parse_variant)},
      {"inference.steps", CARDNET_INT(inference.steps)},
      {"inference.step_size", CARDNET_REAL(inference.step_size)},
      {"inference.momentum", CARDNET_REAL(inference.momentum)},
      {"inference.dykstra_rounds", CARDNET_INT(inference.dykstra_rounds)},
      {"inference.sharpness", CARDNET_REAL(inference.sharpness)},
      {"inference.z_source", CARDNET_ENUM(inference.z_source, parse_z_source)},
      {"inference.z_mode", CARDNET_ENUM(inference.z_mode, parse_cardinality_mode)},
      {"inference.projection", CARDNET_ENUM(inference.projection, parse_projection)},
      {"inference.fast_iterations", CARDNET_INT(inference.fast_iterations)},
      {"inference.detach_residuals", CARDNET_BOOL(inference.detach_residuals)},
      {"inference.decode", CARDNET_ENUM(decode, parse_decode)},
      {"loss.single_step", CARDNET_ENUM(loss.single_step, parse_single_step_loss)},
      {"loss.aux_weight", CARDNET_REAL(loss.aux_cardinality_weight)},
      {"optim.learning_rate", CARDNET_REAL(optim.learning_rate)},
      {"optim.batch_size", CARDNET_INT(optim.batch_size)},
      {"optim.epochs", CARDNET_INT(optim.epochs)},
      {"optim.patience", CARDNET_INT(optim.patience)},
      {"optim.log_train_metrics", CARDNET_BOOL(optim.log_train_metrics)},
      {"output.checkpoint", CARDNET_STRING(checkpoint)},
      {"output.metrics", CARDNET_STRING(metrics)},
      {"gradcheck.example", CARDNET_INT(gradcheck.example)},
      {"gradcheck.step", CARDNET_REAL(gradcheck.step)},
      {"gradcheck.kink_tolerance", CARDNET_REAL(gradcheck.kink_tolerance)},
      {"gradcheck.threshold", CARDNET_REAL(gradcheck.threshold)},
      {"gradcheck.corrupt_backward", CARDNET_BOOL(gradcheck.corrupt_backward)},
  };
  return table;
}

#undef CARDNET_INT
#undef CARDNET_REAL
#undef CARDNET_BOOL
#undef CARDNET_STRING
#undef CARDNET_ENUM

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError(key, what);
}

bool fraction(double f) { return std::isfinite(f) && f >= 0.0 && f < 1.0; }

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& table = fields();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError(key, "unknown key");
  it->second.set(*this, key, value);
  optim.seed = seed;
  optim.decode = decode;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : fields()) out.push_back(k);
  return out;
}

std::string RunConfig::serialize() const {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(*this) + "\n";
  return out;
}

void RunConfig::validate() const {
  if (data.synthetic) {
    const CardinalityRule& r = synthetic.rule;
    require(synthetic.examples >= 1, "synthetic.examples", "must be >= 1");
    require(synthetic.labels >= 1, "synthetic.labels", "must be >= 1");
    require(synthetic.features >= 1, "synthetic.features", "must be >= 1");
    require(r.min_words >= 1, "synthetic.min_words", "must be >= 1");
    require(r.max_words >= r.min_words, "synthetic.max_words", "must be >= synthetic.min_words");
    require(r.max_words <= synthetic.features, "synthetic.max_words",
            "must be <= synthetic.features");
    require(r.min_card >= 0, "synthetic.min_card", "must be >= 0");
    require(r.max_card >= r.min_card, "synthetic.max_card", "must be >= synthetic.min_card");
    require(r.max_card <= synthetic.labels, "synthetic.max_card", "must be <= synthetic.labels");
  } else {
    require(!data.train.empty(), "data.train", "required unless data.synthetic = true");
  }
  require(data.labels >= 0, "data.labels", "must be >= 0");
  require(data.features >= 0, "data.features", "must be >= 0");
  require(fraction(data.dev_fraction), "data.dev_fraction", "must lie in [0, 1)");
  require(fraction(data.test_fraction), "data.test_fraction", "must lie in [0, 1)");
  require(data.dev_fraction + data.test_fraction < 1.0, "data.test_fraction",
          "dev and test fractions must leave a training split");
  require(data.dev_index.empty() || !data.train_index.empty(), "data.train_index",
          "required when data.dev_index is set");

  require(model.hidden_feature >= 1, "model.hidden_feature", "must be >= 1");
  require(model.feature_dim >= 1, "model.feature_dim", "must be >= 1");
  require(model.hidden_global >= 1, "model.hidden_global", "must be >= 1");
  require(model.hidden_card >= 1, "model.hidden_card", "must be >= 1");
  require(model.max_card >= 0, "model.max_card", "must be >= 0");

  try {
    inference.validate();
  } catch (const std::invalid_argument& e) {
    // Messages read "inference.<field>: <reason>".
    const std::string what = e.what();
    const auto colon = what.find(": ");
    if (colon == std::string::npos) throw ConfigError("inference", what);
    throw ConfigError(what.substr(0, colon), what.substr(colon + 2));
  }
  const bool iterative = inference.variant == Variant::pc || inference.variant == Variant::sc ||
                         inference.variant == Variant::logit;
  require(!iterative || inference.steps >= 1, "inference.steps",
          "must be >= 1 for variant " + to_string(inference.variant));
  wrap("loss.aux_weight", [&] {
    loss.validate();
    return 0;
  });

  require(std::isfinite(optim.learning_rate) && optim.learning_rate > 0.0, "optim.learning_rate",
          "must be > 0");
  require(optim.batch_size >= 1, "optim.batch_size", "must be >= 1");
  require(optim.epochs >= 0, "optim.epochs", "must be >= 0");
  require(optim.patience >= 1, "optim.patience", "must be >= 1");

  require(gradcheck.example >= 0, "gradcheck.example", "must be >= 0");
  require(gradcheck.step > 0.0, "gradcheck.step", "must be > 0");
  require(gradcheck.kink_tolerance > 0.0, "gradcheck.kink_tolerance", "must be > 0");
  require(gradcheck.threshold > 0.0, "gradcheck.threshold", "must be > 0");
}

RunConfig parse_config(std::istream& in, const std::string& source) {
  RunConfig cfg;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(number), "expected 'key = value'");
    }
    cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open '" + path + "'");
  return parse_config(in, path);
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments) {
  for (const std::string& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError(a, "override must look like key=value");
    cfg.set(trim(a.substr(0, eq)), trim(a.substr(eq + 1)));
  }
}

RunData load_run_data(const RunConfig& cfg) {
  RunData out;
  const double train_fraction = 1.0 - cfg.data.dev_fraction - cfg.data.test_fraction;
  auto fraction_split = [&](const Dataset& all) {
    Splits s = split_dataset(all, {train_fraction, cfg.data.dev_fraction,
                                   cfg.data.test_fraction, cfg.seed});
    out.train = std::move(s.train);
    if (cfg.data.dev_fraction > 0.0) out.dev = std::move(s.dev);
    if (cfg.data.test_fraction > 0.0) out.test = std::move(s.test);
  };

  if (cfg.data.synthetic) {
    fraction_split(generate_synthetic(cfg.synthetic, cfg.seed));
    return out;
  }

  Dataset all = load_sparse_multilabel(cfg.data.train, cfg.data.labels, cfg.data.features);
  if (!cfg.data.train_index.empty()) {
    out.train = select_rows(all, cfg.data.train_index, "train");
    if (!cfg.data.dev_index.empty()) out.dev = select_rows(all, cfg.data.dev_index, "dev");
  } else if (cfg.data.dev.empty()) {
    fraction_split(all);
  } else {
    out.train = std::move(all);
  }
  if (!cfg.data.dev.empty() && !out.dev) {
    out.dev = load_sparse_multilabel(cfg.data.dev, out.train.labels, out.train.features);
  }
  if (!cfg.data.test.empty()) {
    out.test = load_sparse_multilabel(cfg.data.test, out.train.labels, out.train.features);
  }
  return out;
}

Architecture architecture_for(const RunConfig& cfg, const Dataset& train) {
  Architecture a;
  a.features = train.features;
  a.labels = train.labels;
  a.hidden_feature = cfg.model.hidden_feature;
  a.feature_dim = cfg.model.feature_dim;
  a.hidden_global = cfg.model.hidden_global;
  a.hidden_card = cfg.model.hidden_card;
  a.max_card = cfg.model.max_card > 0 ? cfg.model.max_card
                                      : std::max(1, train.max_cardinality());
  if (a.max_card > a.labels) {
    throw ConfigError("model.max_card", std::to_string(a.max_card) + " exceeds the " +
                                            std::to_string(a.labels) + " labels");
  }
  a.sc_weights = cfg.inference.variant == Variant::sc;
  return a;
}

}  // namespace cardnet
