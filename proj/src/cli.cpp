#include "cardnet/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cardnet/config.hpp"
#include "cardnet/projections.hpp"

namespace cardnet {

namespace {

std::string fmt(double x) {
  if (x == 0.0) x = 0.0;  // no "-0"
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
  apply_overrides(cfg, overrides);
  cfg.validate();
  return cfg;
}

Metadata checkpoint_metadata(const RunConfig& cfg, const Dataset& train, int best_epoch) {
  Metadata meta;
  std::istringstream lines(cfg.serialize());
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find(" = ");
    meta["config." + line.substr(0, eq)] = line.substr(eq + 3);
  }
  const CardinalityStats s = cardinality_stats(train);
  meta["train.card_mean"] = fmt(s.mean);
  meta["train.card_min"] = std::to_string(s.min);
  meta["train.card_max"] = std::to_string(s.max);
  meta["train.best_epoch"] = std::to_string(best_epoch);
  return meta;
}

RunConfig config_from_metadata(const Metadata& meta) {
  RunConfig cfg;
  for (const auto& [k, v] : meta) {
    if (k.rfind("config.", 0) == 0) cfg.set(k.substr(7), v);
  }
  return cfg;
}

CardinalityStats stats_from_metadata(const Metadata& meta) {
  CardinalityStats s;
  auto get = [&](const std::string& key) -> const std::string& {
    const auto it = meta.find(key);
    if (it == meta.end()) throw std::runtime_error("checkpoint lacks metadata '" + key + "'");
    return it->second;
  };
  s.mean = std::stod(get("train.card_mean"));
  s.min = std::stoi(get("train.card_min"));
  s.max = std::stoi(get("train.card_max"));
  return s;
}

// ---- train ------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              std::ostream& out) {
  RunConfig cfg = resolve_config(config_path, overrides);
  if (cfg.checkpoint.empty()) throw ConfigError("output.checkpoint", "required for train");
  RunData data = load_run_data(cfg);
  const Architecture arch = architecture_for(cfg, data.train);
  ScoreModel model = ScoreModel::initialize(arch, cfg.seed);

  std::ofstream metrics;
  if (!cfg.metrics.empty()) {
    metrics.open(cfg.metrics);
    if (!metrics) throw ConfigError("output.metrics", "cannot write '" + cfg.metrics + "'");
  }
  auto on_record = [&](const MetricsRecord& r) {
    const std::string line = r.to_line();
    out << line << '\n';
    if (metrics.is_open()) metrics << line << '\n' << std::flush;
  };
  const Dataset* dev = data.dev ? &*data.dev : nullptr;
  TrainResult result = train(data.train, dev, model, cfg.inference, cfg.loss, cfg.optim, on_record);
  save_checkpoint(cfg.checkpoint, result.model,
                  checkpoint_metadata(cfg, data.train, result.best_epoch));
  return exit_ok;
}

// ---- eval -------------------------------------------------------------------

struct EvalFlags {
  std::string checkpoint, config, data, split = "dev", variant, z, decode, projection;
  std::vector<std::string> overrides;
};

int cmd_eval(const EvalFlags& f, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(f.checkpoint);
  const Architecture& arch = ck.model.arch();
  RunConfig run = config_from_metadata(ck.metadata);
  const CardinalityStats stats = stats_from_metadata(ck.metadata);
  if (!f.variant.empty()) run.set("inference.variant", f.variant);
  if (!f.z.empty()) run.set("inference.z_source", f.z);
  if (!f.decode.empty()) run.set("inference.decode", f.decode);
  if (!f.projection.empty()) run.set("inference.projection", f.projection);
  if (run.inference.variant == Variant::sc && !arch.sc_weights) {
    throw ConfigError("inference.variant", "checkpoint has no indicator weights for sc");
  }

  Dataset data;
  if (!f.data.empty()) {
    data = load_sparse_multilabel(f.data);
  } else {
    if (f.config.empty()) throw ConfigError("eval", "pass --data or --config");
    RunConfig cfg = resolve_config(f.config, f.overrides);
    RunData d = load_run_data(cfg);
    if (f.split == "train") data = std::move(d.train);
    else if (f.split == "dev" && d.dev) data = std::move(*d.dev);
    else if (f.split == "test" && d.test) data = std::move(*d.test);
    else throw ConfigError("split", "no '" + f.split + "' split in the config");
  }
  if (data.labels > arch.labels || data.features > arch.features) {
    throw std::invalid_argument("dimension mismatch: checkpoint expects L=" +
                                std::to_string(arch.labels) + ", D=" +
                                std::to_string(arch.features) + " but the data has L=" +
                                std::to_string(data.labels) + ", D=" +
                                std::to_string(data.features));
  }
  data.labels = arch.labels;
  data.features = arch.features;

  const EvalReport r = evaluate(ck.model, data, run.inference, run.loss, run.decode, stats, run.seed);
  out << "split=" << (f.data.empty() ? f.split : "file") << "\tvariant=" << to_string(run.inference.variant)
      << "\tdecode=" << to_string(run.decode) << "\tz_source=" << to_string(run.inference.z_source)
      << "\texamples=" << data.size() << "\tloss=" << fmt(r.loss)
      << "\tf1=" << fmt(r.f1.example_averaged) << "\tf1_macro=" << fmt(r.f1.label_macro)
      << "\tcard_mse=" << fmt(r.card.predictor) << "\tcard_mse_const=" << fmt(r.card.constant)
      << "\tcard_mse_rand=" << fmt(r.card.random)
      << "\tmean_residual_sum=" << fmt(r.mean_residual_sum)
      << "\tmax_residual_box=" << fmt(r.max_residual_box) << '\n';
  return exit_ok;
}

// ---- project ----------------------------------------------------------------

struct ProjectFlags {
  std::string op, z, input, mode = "exact";
  int rounds = -1;
  int iterations = 30;
  double sharpness = 10.0;
  bool diagnostics = false;
};

std::vector<double> parse_vector(const std::string& line) {
  std::istringstream in(line);
  std::vector<double> v;
  std::string tok;
  while (in >> tok) {
    char* end = nullptr;
    const double x = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size() || !std::isfinite(x)) {
      throw std::invalid_argument("not a finite number: '" + tok + "'");
    }
    v.push_back(x);
  }
  return v;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ' ';
    s += fmt(v[i]);
  }
  return s;
}

double parse_scalar_z(const std::string& z) {
  const auto v = parse_vector(z);
  if (v.size() != 1) throw ConfigError("z", "expected one number, got '" + z + "'");
  return v[0];
}

std::vector<double> project_line(const ProjectFlags& f, const std::vector<double>& v, double z) {
  const int n = static_cast<int>(v.size());
  const bool soft = f.mode == "soft";
  if (f.op == "simplex") {
    if (!soft) return proj::project_simplex_exact(v, z);
    dg::Tape tape;
    auto y = proj::project_simplex_soft(tape.constant(v), z, f.sharpness).value();
    return {y.begin(), y.end()};
  }
  const proj::CappedSimplexSpec spec{n, z};
  if (f.op == "capped") return proj::project_capped_exact(v, spec);
  if (f.op == "dykstra") {
    const int rounds = f.rounds < 0 ? 2 : f.rounds;
    return proj::project_capped_dykstra(v, spec, rounds, f.sharpness,
                                        soft ? proj::SimplexMode::soft : proj::SimplexMode::exact)
        .y;
  }
  if (f.op == "fast") {
    dg::Tape tape;
    auto y = proj::project_capped_fast_soft(tape.constant(v), spec, f.iterations, f.sharpness)
                 .value();
    return {y.begin(), y.end()};
  }
  throw ConfigError("op", "unknown operator '" + f.op + "'");
}

int cmd_project(const ProjectFlags& f, std::istream& stdin_, std::ostream& out, std::ostream& err) {
  if (f.mode != "exact" && f.mode != "soft") {
    throw ConfigError("mode", "expected exact or soft, got '" + f.mode + "'");
  }
  std::ifstream file;
  if (!f.input.empty()) {
    file.open(f.input);
    if (!file) throw ConfigError("input", "cannot open '" + f.input + "'");
  }
  std::istream& in = f.input.empty() ? stdin_ : file;

  if (f.op == "matrix") {
    std::vector<double> z;
    std::string zs = f.z;
    for (char& c : zs) {
      if (c == ',') c = ' ';
    }
    z = parse_vector(zs);
    proj::Matrix m;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      const auto row = parse_vector(line);
      if (row.empty()) continue;
      if (m.rows == 0) m.cols = static_cast<int>(row.size());
      if (static_cast<int>(row.size()) != m.cols) {
        throw std::invalid_argument("line " + std::to_string(number) + ": expected " +
                                    std::to_string(m.cols) + " columns");
      }
      m.data.insert(m.data.end(), row.begin(), row.end());
      ++m.rows;
    }
    const proj::Matrix y = proj::project_matrix_rows_cols(m, z, f.rounds < 0 ? 100 : f.rounds);
    for (int i = 0; i < y.rows; ++i) {
      out << join(std::vector<double>(y.data.begin() + i * y.cols,
                                      y.data.begin() + (i + 1) * y.cols))
          << '\n';
    }
    return exit_ok;
  }

  const double z = parse_scalar_z(f.z);
  int status = exit_ok;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    try {
      const auto v = parse_vector(line);
      if (v.empty()) continue;
      const auto y = project_line(f, v, z);
      out << join(y) << '\n';
      if (f.diagnostics) {
        const auto d = proj::diagnose(y, z, 0);
        err << "line " << number << ": residual_sum=" << fmt(d.residual_sum)
            << " residual_box=" << fmt(d.residual_box) << '\n';
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      err << "error: line " << number << ": " << e.what() << '\n';
      status = exit_usage;
    }
  }
  return status;
}

// ---- gradcheck --------------------------------------------------------------

int cmd_gradcheck(const std::string& config_path, const std::vector<std::string>& overrides,
                  std::ostream& out) {
  RunConfig cfg = resolve_config(config_path, overrides);
  RunData data = load_run_data(cfg);
  const Architecture arch = architecture_for(cfg, data.train);
  if (arch.labels > 8) throw ConfigError("data.labels", "gradcheck needs L <= 8");
  if (cfg.inference.steps > 3) throw ConfigError("inference.steps", "gradcheck needs T <= 3");
  if (cfg.gradcheck.example >= static_cast<int>(data.train.size())) {
    throw ConfigError("gradcheck.example", "index beyond the " +
                                               std::to_string(data.train.size()) +
                                               " training examples");
  }
  const ScoreModel model = ScoreModel::initialize(arch, cfg.seed);
  GradcheckOptions opts;
  opts.step = cfg.gradcheck.step;
  opts.kink_tolerance = cfg.gradcheck.kink_tolerance;
  opts.corrupt_backward = cfg.gradcheck.corrupt_backward;
  const GradcheckReport r = gradcheck(model, data.train.examples[cfg.gradcheck.example],
                                      cfg.inference, cfg.loss, opts);
  for (const GroupError& g : r.groups) {
    out << "group=" << group_name(g.group) << "\tmax_rel_error=" << fmt(g.max_rel_error)
        << "\tchecked=" << g.checked << "\tskipped=" << g.skipped << '\n';
  }
  const bool ok = r.max_rel_error <= cfg.gradcheck.threshold;
  out << "max_rel_error=" << fmt(r.max_rel_error) << "\tthreshold=" << fmt(cfg.gradcheck.threshold)
      << "\tstatus=" << (ok ? "ok" : "FAILED") << '\n';
  return ok ? exit_ok : exit_check_failed;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::istream& in, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"Structured multi-label prediction with cardinality constraints", "cardnet"};
  app.require_subcommand(1);

  std::string config;
  std::vector<std::string> overrides;
  auto add_config = [&](CLI::App* cmd, bool required) {
    auto* opt = cmd->add_option("-c,--config", config, "key = value config file");
    if (required) opt->required();
    cmd->add_option("-s,--set", overrides, "override a config entry (key=value)");
  };

  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  add_config(train_cmd, true);

  EvalFlags ef;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ef.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("-c,--config", ef.config, "config describing the data splits");
  eval_cmd->add_option("-s,--set", ef.overrides, "override a config entry (key=value)");
  eval_cmd->add_option("--data", ef.data, "multilabel data file to evaluate");
  eval_cmd->add_option("--split", ef.split, "train, dev or test (with --config)");
  eval_cmd->add_option("--variant", ef.variant, "pc, sc, logit, topz or unary");
  eval_cmd->add_option("--z", ef.z, "predictor or fixed:<z>");
  eval_cmd->add_option("--decode", ef.decode, "threshold or topz");
  eval_cmd->add_option("--projection", ef.projection, "dykstra or fast");

  ProjectFlags pf;
  auto* project_cmd = app.add_subcommand("project", "project vectors read one per line");
  project_cmd->add_option("--op", pf.op, "simplex, capped, dykstra, fast or matrix")->required();
  project_cmd->add_option("--z", pf.z, "target sum (matrix: comma-separated column sums)")
      ->required();
  project_cmd->add_option("--input", pf.input, "input file (default: standard input)");
  project_cmd->add_option("--mode", pf.mode, "exact or soft (simplex, dykstra)");
  project_cmd->add_option("--rounds", pf.rounds, "alternating-projection rounds");
  project_cmd->add_option("--iterations", pf.iterations, "bisection iterations (fast)");
  project_cmd->add_option("--sharpness", pf.sharpness, "soft sorting sharpness");
  project_cmd->add_flag("--diagnostics", pf.diagnostics, "residuals to standard error");

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "compare gradients with finite differences");
  add_config(gradcheck_cmd, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_usage;
  }

  try {
    if (*train_cmd) return cmd_train(config, overrides, out);
    if (*eval_cmd) return cmd_eval(ef, out);
    if (*project_cmd) return cmd_project(pf, in, out, err);
    if (*gradcheck_cmd) return cmd_gradcheck(config, overrides, out);
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return exit_numerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_usage;
  }
  return exit_usage;
}

}  // namespace cardnet
