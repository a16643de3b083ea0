#include "cardnet/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "cardnet/projections.hpp"

namespace cardnet {

namespace {

[[noreturn]] void bad_field(const std::string& field, const std::string& what) {
  throw std::invalid_argument("inference." + field + ": " + what);
}

struct ZChoice {
  dg::Var z;
  dg::Var log_probs;
};

ZChoice choose_z(const BoundModel& m, dg::SparseView x, const InferenceConfig& cfg) {
  dg::Tape& tape = m.vars.front().tape();
  ZChoice c;
  c.log_probs = cardinality_log_probs(m, x);
  const int labels = m.model->arch().labels;
  if (cfg.z_source.fixed) {
    if (cfg.z_source.value < 0.0 || cfg.z_source.value > labels) {
      throw std::invalid_argument("fixed cardinality " + std::to_string(cfg.z_source.value) +
                                  " outside [0, " + std::to_string(labels) + "]");
    }
    c.z = tape.scalar(cfg.z_source.value);
  } else {
    c.z = cardinality_from_distribution(dg::softmax(c.log_probs), cfg.z_mode);
  }
  return c;
}

dg::Var project(dg::Var v, dg::Var z, const InferenceConfig& cfg) {
  if (cfg.projection == ProjectionKind::fast) {
    return proj::project_capped_fast_soft(v, z, cfg.fast_iterations, cfg.sharpness);
  }
  return proj::project_capped_dykstra(
      v, z, proj::DykstraOptions{cfg.dykstra_rounds, cfg.sharpness, cfg.detach_residuals});
}

Trajectory start(const BoundModel& m, dg::SparseView x, const InferenceConfig& cfg) {
  cfg.validate();
  Trajectory tr;
  tr.unary = unary_scores(m, x);
  ZChoice zc = choose_z(m, x, cfg);
  tr.z = zc.z;
  tr.card_log_probs = zc.log_probs;
  tr.z_used = zc.z.scalar();
  if (!std::isfinite(tr.z_used)) throw NumericalError("non-finite cardinality prediction");
  tr.states.push_back(init_labels(tr.unary));
  return tr;
}

// Shared momentum loop: velocity <- momentum * velocity + eta * gradient,
// tentative point <- y + velocity, y <- post(tentative).
template <class Gradient, class Post>
void ascend(Trajectory& tr, const InferenceConfig& cfg, Gradient gradient, Post post) {
  dg::Tape& tape = tr.unary.tape();
  dg::Var y = tr.states.back();
  dg::Var velocity = tape.constant(std::vector<double>(y.size(), 0.0));
  for (int t = 0; t < cfg.steps; ++t) {
    velocity = dg::add(dg::scale(velocity, cfg.momentum), dg::scale(gradient(y), cfg.step_size));
    y = post(dg::add(y, velocity));
    tr.states.push_back(y);
  }
}

}  // namespace

void InferenceConfig::validate() const {
  if (steps < 0) bad_field("steps", "must be >= 0");
  if (!(step_size > 0.0)) bad_field("step_size", "must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) bad_field("momentum", "must lie in [0, 1)");
  if (dykstra_rounds < 1) bad_field("dykstra_rounds", "must be >= 1");
  if (!(sharpness > 0.0)) bad_field("sharpness", "must be > 0");
  if (fast_iterations < 1) bad_field("fast_iterations", "must be >= 1");
  if (z_source.fixed && !(z_source.value >= 0.0)) bad_field("z_source", "fixed z must be >= 0");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::pc: return "pc";
    case Variant::sc: return "sc";
    case Variant::logit: return "logit";
    case Variant::topz: return "topz";
    case Variant::unary: return "unary";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "pc") return Variant::pc;
  if (s == "sc") return Variant::sc;
  if (s == "logit") return Variant::logit;
  if (s == "topz") return Variant::topz;
  if (s == "unary" || s == "mlp") return Variant::unary;
  throw std::invalid_argument("unknown variant '" + s + "' (pc|sc|logit|topz|unary)");
}

std::string to_string(ProjectionKind p) { return p == ProjectionKind::fast ? "fast" : "dykstra"; }

ProjectionKind parse_projection(const std::string& s) {
  if (s == "dykstra") return ProjectionKind::dykstra;
  if (s == "fast") return ProjectionKind::fast;
  throw std::invalid_argument("unknown projection '" + s + "' (dykstra|fast)");
}

std::string to_string(Decode d) { return d == Decode::topz ? "topz" : "threshold"; }

Decode parse_decode(const std::string& s) {
  if (s == "threshold") return Decode::threshold;
  if (s == "topz") return Decode::topz;
  throw std::invalid_argument("unknown decode '" + s + "' (threshold|topz)");
}

std::string to_string(const ZSource& z) {
  if (!z.fixed) return "predictor";
  char buf[48];
  std::snprintf(buf, sizeof buf, "fixed:%.17g", z.value);
  return buf;
}

ZSource parse_z_source(const std::string& s) {
  if (s == "predictor") return {};
  if (s.rfind("fixed:", 0) == 0) {
    const std::string num = s.substr(6);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(num, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != num.size()) {
      throw std::invalid_argument("bad fixed cardinality '" + num + "'");
    }
    return {true, v};
  }
  throw std::invalid_argument("unknown z source '" + s + "' (predictor|fixed:<z>)");
}

std::string to_string(CardinalityMode m) {
  return m == CardinalityMode::argmax ? "argmax" : "expected";
}

CardinalityMode parse_cardinality_mode(const std::string& s) {
  if (s == "expected") return CardinalityMode::expected;
  if (s == "argmax") return CardinalityMode::argmax;
  throw std::invalid_argument("unknown cardinality mode '" + s + "' (expected|argmax)");
}

dg::Var init_labels(dg::Var unary) { return dg::sigmoid(unary); }

dg::Var score_gradient(const BoundModel& m, dg::Var unary, dg::Var y) {
  return dg::add(unary, global_score_gradient(m, y));
}

Trajectory unrolled_pgd(const BoundModel& m, dg::SparseView x, const InferenceConfig& cfg) {
  Trajectory tr = start(m, x, cfg);
  ascend(
      tr, cfg, [&](dg::Var y) { return score_gradient(m, tr.unary, y); },
      [&](dg::Var v) { return project(v, tr.z, cfg); });
  return tr;
}

Trajectory unrolled_sc(const BoundModel& m, dg::SparseView x, const InferenceConfig& cfg) {
  if (!m.has("sc_w")) {
    throw std::invalid_argument("sc inference needs a model built with sc_weights");
  }
  Trajectory tr = start(m, x, cfg);
  ascend(
      tr, cfg,
      [&](dg::Var y) {
        return dg::add(score_gradient(m, tr.unary, y), sc_cardinality_gradient(m, y));
      },
      [](dg::Var v) { return dg::clip01(v); });
  return tr;
}

Trajectory unrolled_logit(const BoundModel& m, dg::SparseView x, const InferenceConfig& cfg) {
  Trajectory tr = start(m, x, cfg);
  dg::Tape& tape = tr.unary.tape();
  dg::Var logits = tr.unary;
  dg::Var velocity = tape.constant(std::vector<double>(logits.size(), 0.0));
  dg::Var y = tr.states.back();
  for (int t = 0; t < cfg.steps; ++t) {
    // d/d(alpha) s(sigmoid(alpha)) = grad_y s * y * (1 - y)
    dg::Var dy = dg::mul(y, dg::shift(-y, 1.0));
    dg::Var g = dg::mul(score_gradient(m, tr.unary, y), dy);
    velocity = dg::add(dg::scale(velocity, cfg.momentum), dg::scale(g, cfg.step_size));
    logits = dg::add(logits, velocity);
    y = dg::sigmoid(logits);
    tr.states.push_back(y);
  }
  return tr;
}

Trajectory run_inference(const BoundModel& m, dg::SparseView x, const InferenceConfig& cfg) {
  switch (cfg.variant) {
    case Variant::pc: return unrolled_pgd(m, x, cfg);
    case Variant::sc: return unrolled_sc(m, x, cfg);
    case Variant::logit: return unrolled_logit(m, x, cfg);
    case Variant::topz:
    case Variant::unary: return start(m, x, cfg);
  }
  throw std::logic_error("unhandled variant");
}

std::vector<std::uint8_t> exact_topz(std::span<const double> c, int z) {
  if (z < 0 || static_cast<std::size_t>(z) > c.size()) {
    throw std::invalid_argument("exact_topz: z = " + std::to_string(z) + " outside [0, " +
                                std::to_string(c.size()) + "]");
  }
  std::vector<int> order(c.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&c](int a, int b) { return c[a] > c[b]; });
  std::vector<std::uint8_t> out(c.size(), 0);
  for (int k = 0; k < z; ++k) out[order[k]] = 1;
  return out;
}

Prediction decode_trajectory(const Trajectory& tr, const InferenceConfig& cfg, Decode decode) {
  const int labels = static_cast<int>(tr.unary.size());
  Prediction p;
  p.z = tr.z_used;
  auto lp = tr.card_log_probs.value();
  p.predicted_cardinality =
      static_cast<double>(std::max_element(lp.begin(), lp.end()) - lp.begin());
  auto yv = tr.states.back().value();
  p.y.assign(yv.begin(), yv.end());
  const int z_int = std::clamp(static_cast<int>(std::lround(p.z)), 0, labels);

  if (cfg.variant == Variant::topz) {
    p.labels = exact_topz(tr.unary.value(), z_int);
    p.y.assign(p.labels.begin(), p.labels.end());
  } else if (decode == Decode::topz) {
    p.labels = exact_topz(p.y, z_int);
  } else {
    p.labels.resize(p.y.size());
    for (std::size_t i = 0; i < p.y.size(); ++i) p.labels[i] = p.y[i] > 0.5 ? 1 : 0;
  }
  const auto diag = proj::diagnose(p.y, p.z, 0);
  p.residual_sum = diag.residual_sum;
  p.residual_box = diag.residual_box;
  return p;
}

Prediction predict(const ScoreModel& model, dg::SparseView x, const InferenceConfig& cfg,
                   Decode decode) {
  dg::Tape tape;
  BoundModel m = bind(tape, model, false);
  return decode_trajectory(run_inference(m, x, cfg), cfg, decode);
}

double score_value(const ScoreModel& model, dg::SparseView x, std::span<const double> y) {
  dg::Tape tape;
  BoundModel m = bind(tape, model, false);
  dg::Var yv = tape.constant(std::vector<double>(y.begin(), y.end()));
  return dg::add(dg::dot(unary_scores(m, x), yv), global_score(m, yv)).scalar();
}

std::vector<std::vector<double>> replay_pgd_exact(const ScoreModel& model, dg::SparseView x,
                                                  const InferenceConfig& cfg) {
  cfg.validate();
  dg::Tape tape;
  BoundModel m = bind(tape, model, false);
  dg::Var c = unary_scores(m, x);
  const double z = choose_z(m, x, cfg).z.scalar();
  const int labels = model.arch().labels;
  const proj::CappedSimplexSpec spec{labels, z};

  std::vector<std::vector<double>> states;
  auto y0 = init_labels(c).value();
  std::vector<double> y(y0.begin(), y0.end()), velocity(labels, 0.0), tentative(labels);
  states.push_back(y);
  for (int t = 0; t < cfg.steps; ++t) {
    auto g = score_gradient(m, c, tape.constant(y)).value();
    for (int i = 0; i < labels; ++i) {
      velocity[i] = cfg.momentum * velocity[i] + cfg.step_size * g[i];
      tentative[i] = y[i] + velocity[i];
    }
    y = proj::project_capped_exact(tentative, spec);
    states.push_back(y);
  }
  return states;
}

}  // namespace cardnet
