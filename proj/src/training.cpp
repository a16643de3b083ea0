#include "cardnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

namespace cardnet {

std::string to_string(SingleStepLoss l) {
  return l == SingleStepLoss::cross_entropy ? "cross_entropy" : "soft_f1";
}

SingleStepLoss parse_single_step_loss(const std::string& s) {
  if (s == "soft_f1" || s == "softF1") return SingleStepLoss::soft_f1;
  if (s == "cross_entropy" || s == "crossEntropy") return SingleStepLoss::cross_entropy;
  throw std::invalid_argument("unknown loss '" + s + "' (soft_f1|cross_entropy)");
}

void LossConfig::validate() const {
  if (!std::isfinite(aux_cardinality_weight) || aux_cardinality_weight < 0.0) {
    throw std::invalid_argument("loss.aux_weight: must be finite and >= 0");
  }
}

// ---- losses ---------------------------------------------------------------

double soft_f1_loss(std::span<const double> y, std::span<const double> target) {
  if (y.size() != target.size()) throw std::invalid_argument("soft_f1_loss: length mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    num += y[i] * target[i];
    den += y[i] + target[i];
  }
  if (den == 0.0) return 0.0;
  return -2.0 * num / den;
}

dg::Var soft_f1_loss(dg::Var y, std::span<const double> target) {
  using namespace dg;
  if (y.size() != target.size()) throw std::invalid_argument("soft_f1_loss: length mismatch");
  Tape& tape = y.tape();
  const double target_sum = std::accumulate(target.begin(), target.end(), 0.0);
  Var t = tape.constant(std::vector<double>(target.begin(), target.end()));
  Var den = shift(sum(y), target_sum);
  if (den.scalar() == 0.0) return tape.scalar(0.0);
  return scale(div(dot(y, t), den), -2.0);
}

dg::Var cross_entropy_loss(dg::Var y, std::span<const double> target) {
  using namespace dg;
  if (y.size() != target.size()) {
    throw std::invalid_argument("cross_entropy_loss: length mismatch");
  }
  constexpr double kEps = 1e-12;
  Tape& tape = y.tape();
  // Soft projections may overshoot [0, 1] slightly.
  Var yc = shift(scale(clip01(y), 1.0 - 2.0 * kEps), kEps);
  std::vector<double> t(target.begin(), target.end()), one_minus_t(target.size());
  for (std::size_t i = 0; i < t.size(); ++i) one_minus_t[i] = 1.0 - t[i];
  Var ll = add(mul(tape.constant(t), log(yc)),
               mul(tape.constant(one_minus_t), log(shift(-yc, 1.0))));
  return scale(sum(ll), -1.0 / static_cast<double>(target.size()));
}

dg::Var single_step_loss(dg::Var y, std::span<const double> target, SingleStepLoss kind) {
  return kind == SingleStepLoss::soft_f1 ? soft_f1_loss(y, target)
                                         : cross_entropy_loss(y, target);
}

dg::Var weighted_trajectory_loss(std::span<const dg::Var> states, std::span<const double> target,
                                 SingleStepLoss kind) {
  if (states.empty()) throw std::invalid_argument("weighted_trajectory_loss: empty trajectory");
  if (states.size() == 1) return single_step_loss(states[0], target, kind);
  const int T = static_cast<int>(states.size()) - 1;
  dg::Var total;
  for (int t = 1; t <= T; ++t) {
    dg::Var term = dg::scale(single_step_loss(states[t], target, kind),
                             1.0 / (static_cast<double>(T) * (T - t + 1)));
    total = total.valid() ? dg::add(total, term) : term;
  }
  return total;
}

double weighted_trajectory_loss(std::span<const double> step_losses) {
  if (step_losses.empty()) {
    throw std::invalid_argument("weighted_trajectory_loss: empty trajectory");
  }
  const int T = static_cast<int>(step_losses.size());
  double total = 0.0;
  for (int t = 1; t <= T; ++t) total += step_losses[t - 1] / (T - t + 1);
  return total / T;
}

// ---- AdaGrad ----------------------------------------------------------------

void AdaGrad::step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads) {
  if (grads.size() != params.size()) throw std::invalid_argument("adagrad: group count mismatch");
  if (accum_.empty()) {
    accum_.reserve(params.size());
    for (const Tensor& p : params) accum_.emplace_back(p.data.size(), 0.0);
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& theta = params[k].data;
    auto& acc = accum_[k];
    const auto& g = grads[k];
    if (g.size() != theta.size() || acc.size() != theta.size()) {
      throw std::invalid_argument("adagrad: shape mismatch for " + params[k].name);
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (g[i] == 0.0) continue;
      acc[i] += g[i] * g[i];
      theta[i] -= lr_ * g[i] / (std::sqrt(acc[i]) + eps_);
    }
  }
}

// ---- per-example loss -------------------------------------------------------

namespace {

struct LossNodes {
  dg::Var total, trajectory, cardinality;
  Trajectory tr;
};

LossNodes build_loss(const BoundModel& m, const Example& ex, const InferenceConfig& inference,
                     const LossConfig& loss) {
  const Architecture& arch = m.model->arch();
  LossNodes n;
  n.tr = run_inference(m, ex.x.view(), inference);
  const auto target = ex.target(arch.labels);
  n.trajectory = weighted_trajectory_loss(n.tr.states, target, loss.single_step);
  const int k = std::min(ex.cardinality(), arch.max_card);
  n.cardinality = dg::scale(dg::pick(n.tr.card_log_probs, k), -1.0);
  n.total = loss.aux_cardinality_weight > 0.0
                ? dg::add(n.trajectory, dg::scale(n.cardinality, loss.aux_cardinality_weight))
                : n.trajectory;
  return n;
}

ExampleLoss values_of(const LossNodes& n) {
  return {n.total.scalar(), n.trajectory.scalar(), n.cardinality.scalar()};
}

std::string format_metric(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

}  // namespace

ExampleLoss accumulate_example_gradient(const ScoreModel& model, const Example& ex,
                                        const InferenceConfig& inference,
                                        const LossConfig& loss,
                                        std::vector<std::vector<double>>& grads) {
  dg::Tape tape;
  BoundModel m = bind(tape, model, true);
  LossNodes n = build_loss(m, ex, inference, loss);
  const ExampleLoss out = values_of(n);
  if (!std::isfinite(out.total)) return out;
  tape.backward(n.total);
  if (grads.size() != m.vars.size()) {
    grads.clear();
    for (const Tensor& t : model.params()) grads.emplace_back(t.data.size(), 0.0);
  }
  for (std::size_t k = 0; k < m.vars.size(); ++k) {
    auto adj = tape.adjoint(m.vars[k]);
    auto& g = grads[k];
    for (std::size_t i = 0; i < adj.size(); ++i) g[i] += adj[i];
  }
  return out;
}

ExampleLoss example_loss(const ScoreModel& model, const Example& ex,
                         const InferenceConfig& inference, const LossConfig& loss) {
  dg::Tape tape;
  BoundModel m = bind(tape, model, false);
  return values_of(build_loss(m, ex, inference, loss));
}

// ---- evaluation -------------------------------------------------------------

EvalReport evaluate(const ScoreModel& model, const Dataset& data, InferenceConfig inference,
                    const LossConfig& loss, Decode decode, const CardinalityStats& train_stats,
                    std::uint64_t seed) {
  inference.z_mode = CardinalityMode::argmax;
  EvalReport r;
  std::vector<std::vector<std::uint8_t>> predicted, targets;
  std::vector<double> card_pred, card_true;
  predicted.reserve(data.size());
  targets.reserve(data.size());
  double loss_sum = 0.0, residual_sum = 0.0;
  for (const Example& ex : data.examples) {
    dg::Tape tape;
    BoundModel m = bind(tape, model, false);
    LossNodes n = build_loss(m, ex, inference, loss);
    loss_sum += n.total.scalar();
    Prediction p = decode_trajectory(n.tr, inference, decode);
    residual_sum += p.residual_sum;
    r.max_residual_box = std::max(r.max_residual_box, p.residual_box);
    predicted.push_back(std::move(p.labels));
    std::vector<std::uint8_t> t(model.arch().labels, 0);
    for (int l : ex.labels) t[l] = 1;
    targets.push_back(std::move(t));
    card_pred.push_back(p.predicted_cardinality);
    card_true.push_back(ex.cardinality());
  }
  r.f1 = eval_f1(predicted, targets);
  r.card = eval_cardinality_mse(card_pred, card_true, train_stats, seed);
  if (!data.examples.empty()) {
    r.loss = loss_sum / data.size();
    r.mean_residual_sum = residual_sum / data.size();
  }
  return r;
}

// ---- metrics records --------------------------------------------------------

std::string MetricsRecord::to_line() const {
  std::ostringstream os;
  os << "epoch=" << epoch << "\tsplit=" << split << "\tloss=" << format_metric(loss)
     << "\tf1=" << format_metric(f1) << "\tf1_macro=" << format_metric(f1_macro)
     << "\tcard_mse=" << format_metric(card_mse);
  return os.str();
}

MetricsRecord MetricsRecord::parse(const std::string& line) {
  MetricsRecord r;
  std::istringstream in(line);
  std::string field;
  int seen = 0;
  while (std::getline(in, field, '\t')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("metrics: bad field '" + field + "'");
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "epoch") r.epoch = std::stoi(value);
    else if (key == "split") r.split = value;
    else if (key == "loss") r.loss = std::stod(value);
    else if (key == "f1") r.f1 = std::stod(value);
    else if (key == "f1_macro") r.f1_macro = std::stod(value);
    else if (key == "card_mse") r.card_mse = std::stod(value);
    else throw std::invalid_argument("metrics: unknown field '" + key + "'");
    ++seen;
  }
  if (seen != 6) throw std::invalid_argument("metrics: expected 6 fields in '" + line + "'");
  return r;
}

// ---- training loop ----------------------------------------------------------

namespace {

MetricsRecord record_from(int epoch, std::string split, const EvalReport& e) {
  return {epoch, std::move(split), e.loss, e.f1.example_averaged, e.f1.label_macro,
          e.card.predictor};
}

void zero(std::vector<std::vector<double>>& grads) {
  for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0);
}

}  // namespace

TrainResult train(const Dataset& train_set, const Dataset* dev_set, ScoreModel model,
                  const InferenceConfig& inference, const LossConfig& loss,
                  const TrainOptions& options,
                  const std::function<void(const MetricsRecord&)>& on_record) {
  inference.validate();
  loss.validate();
  if (options.epochs < 0) throw std::invalid_argument("optim.epochs: must be >= 0");
  if (options.batch_size < 1) throw std::invalid_argument("optim.batch_size: must be >= 1");
  if (train_set.labels != model.arch().labels || train_set.features != model.arch().features) {
    throw std::invalid_argument("training data dimensions (L=" + std::to_string(train_set.labels) +
                                ", D=" + std::to_string(train_set.features) +
                                ") do not match the model");
  }

  TrainResult result{model, {}, 0};
  auto emit = [&](MetricsRecord r) {
    if (on_record) on_record(r);
    result.log.push_back(std::move(r));
  };
  const CardinalityStats stats = cardinality_stats(train_set);

  std::mt19937_64 rng(options.seed);
  AdaGrad optimizer(options.learning_rate);
  std::vector<std::vector<double>> grads;
  for (const Tensor& t : model.params()) grads.emplace_back(t.data.size(), 0.0);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  double best_f1 = -1.0;
  int since_best = 0;
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += options.batch_size) {
      const std::size_t e = std::min(order.size(), b + options.batch_size);
      zero(grads);
      for (std::size_t k = b; k < e; ++k) {
        const auto where = [&] {
          return " at training example " + std::to_string(order[k]) + " (epoch " +
                 std::to_string(epoch) + ")";
        };
        ExampleLoss l;
        try {
          l = accumulate_example_gradient(model, train_set.examples[order[k]], inference, loss,
                                          grads);
        } catch (const NumericalError& e) {
          throw NumericalError(e.what() + where());
        }
        if (!std::isfinite(l.total)) throw NumericalError("non-finite loss" + where());
        epoch_loss += l.total;
      }
      const double inv = 1.0 / static_cast<double>(e - b);
      for (auto& g : grads) {
        for (double& x : g) x *= inv;
      }
      optimizer.step(model.params(), grads);
    }

    if (options.log_train_metrics) {
      EvalReport tr = evaluate(model, train_set, inference, loss, options.decode, stats, options.seed);
      MetricsRecord rec = record_from(epoch, "train", tr);
      rec.loss = train_set.size() ? epoch_loss / train_set.size() : 0.0;
      emit(rec);
    }
    if (dev_set != nullptr && dev_set->size() > 0) {
      EvalReport dv = evaluate(model, *dev_set, inference, loss, options.decode, stats, options.seed);
      emit(record_from(epoch, "dev", dv));
      if (dv.f1.example_averaged > best_f1) {
        best_f1 = dv.f1.example_averaged;
        result.model = model;
        result.best_epoch = epoch;
        since_best = 0;
      } else if (++since_best >= options.patience) {
        break;
      }
    } else {
      result.model = model;
      result.best_epoch = epoch;
    }
  }

  EvalReport final_train =
      evaluate(result.model, train_set, inference, loss, options.decode, stats, options.seed);
  emit(record_from(result.best_epoch, "final-train", final_train));
  if (dev_set != nullptr && dev_set->size() > 0) {
    EvalReport final_dev =
        evaluate(result.model, *dev_set, inference, loss, options.decode, stats, options.seed);
    emit(record_from(result.best_epoch, "final-dev", final_dev));
  }
  return result;
}

ScoreModel train_cardinality_predictor(const Dataset& train_set, ScoreModel model, int epochs,
                                       int batch_size, double learning_rate, std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  std::mt19937_64 rng(seed);
  AdaGrad optimizer(learning_rate);
  std::vector<std::vector<double>> grads;
  for (const Tensor& t : model.params()) grads.emplace_back(t.data.size(), 0.0);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const int max_card = model.arch().max_card;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += batch_size) {
      const std::size_t e = std::min(order.size(), b + batch_size);
      zero(grads);
      for (std::size_t k = b; k < e; ++k) {
        const Example& ex = train_set.examples[order[k]];
        dg::Tape tape;
        BoundModel m = bind(tape, model, true);
        dg::Var lp = cardinality_log_probs(m, ex.x.view());
        dg::Var nll = dg::scale(dg::pick(lp, std::min(ex.cardinality(), max_card)), -1.0);
        tape.backward(nll);
        for (std::size_t p = 0; p < m.vars.size(); ++p) {
          if (ScoreModel::group_of(model.params()[p].name) != ParamGroup::cardinality) continue;
          auto adj = tape.adjoint(m.vars[p]);
          for (std::size_t i = 0; i < adj.size(); ++i) grads[p][i] += adj[i];
        }
      }
      const double inv = 1.0 / static_cast<double>(e - b);
      for (auto& g : grads) {
        for (double& x : g) x *= inv;
      }
      optimizer.step(model.params(), grads);
    }
  }
  return model;
}

// ---- gradient checks -------------------------------------------------------

GradcheckReport gradcheck(const ScoreModel& model, const Example& ex,
                          const InferenceConfig& inference, const LossConfig& loss,
                          const GradcheckOptions& options) {
  std::vector<std::vector<double>> analytic;
  {
    dg::Tape tape;
    tape.set_backward_fault(options.corrupt_backward);
    BoundModel m = bind(tape, model, true);
    LossNodes n = build_loss(m, ex, inference, loss);
    tape.backward(n.total);
    for (const dg::Var& v : m.vars) {
      auto a = tape.adjoint(v);
      analytic.emplace_back(a.begin(), a.end());
    }
  }

  ScoreModel probe = model;
  const double base = example_loss(probe, ex, inference, loss).total;
  const double h = options.step;

  struct Acc {
    double max_diff = 0.0, max_abs = 0.0;
    int checked = 0, skipped = 0;
    bool present = false;
  };
  Acc acc[5];
  for (std::size_t k = 0; k < probe.params().size(); ++k) {
    Tensor& t = probe.params()[k];
    Acc& a = acc[static_cast<int>(ScoreModel::group_of(t.name))];
    a.present = true;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const double saved = t.data[i];
      t.data[i] = saved + h;
      const double up = example_loss(probe, ex, inference, loss).total;
      t.data[i] = saved - h;
      const double down = example_loss(probe, ex, inference, loss).total;
      t.data[i] = saved;
      const double forward = (up - base) / h;
      const double backward = (base - down) / h;
      const double scale = std::max({std::abs(forward), std::abs(backward), 1e-6});
      if (std::abs(forward - backward) > options.kink_tolerance * scale) {
        ++a.skipped;
        continue;
      }
      const double numeric = (up - down) / (2.0 * h);
      a.max_diff = std::max(a.max_diff, std::abs(numeric - analytic[k][i]));
      a.max_abs = std::max({a.max_abs, std::abs(numeric), std::abs(analytic[k][i])});
      ++a.checked;
    }
  }

  GradcheckReport report;
  for (int g = 0; g < 5; ++g) {
    if (!acc[g].present) continue;
    GroupError e{static_cast<ParamGroup>(g), 0.0, acc[g].checked, acc[g].skipped};
    if (acc[g].max_abs > 0.0) e.max_rel_error = acc[g].max_diff / acc[g].max_abs;
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.groups.push_back(e);
  }
  return report;
}

}  // namespace cardnet
