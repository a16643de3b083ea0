#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "cardnet/training.hpp"
#include "oracles.hpp"

using namespace cardnet;

namespace {

std::vector<double> values(dg::Var v) { return {v.value().begin(), v.value().end()}; }

double harmonic(int n) {
  double h = 0.0;
  for (int k = 1; k <= n; ++k) h += 1.0 / k;
  return h;
}

// Loss of a trajectory whose states are given as plain vectors.
double trajectory_loss(const std::vector<std::vector<double>>& states,
                       const std::vector<double>& target, SingleStepLoss kind) {
  dg::Tape t;
  std::vector<dg::Var> vars;
  for (const auto& s : states) vars.push_back(t.constant(s));
  return weighted_trajectory_loss(vars, target, kind).scalar();
}

Architecture small_arch(const Dataset& d, int hidden = 4) {
  Architecture a;
  a.features = d.features;
  a.labels = d.labels;
  a.hidden_feature = hidden;
  a.feature_dim = hidden;
  a.hidden_global = hidden;
  a.hidden_card = hidden;
  a.max_card = d.max_cardinality();
  return a;
}

Dataset small_synthetic(int n, std::uint64_t seed) {
  SyntheticSpec s;
  s.examples = n;
  s.labels = 6;
  s.features = 15;
  s.rule = CardinalityRule{2, 9, 1, 3};
  return generate_synthetic(s, seed);
}

}  // namespace

TEST_CASE("soft F1 loss examples") {
  CHECK(soft_f1_loss(std::vector<double>{1, 0, 1}, std::vector<double>{1, 0, 1}) ==
        doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(soft_f1_loss(std::vector<double>{0, 0}, std::vector<double>{1, 0}) == 0.0);
  CHECK(soft_f1_loss(std::vector<double>{0.5, 0.5}, std::vector<double>{1, 0}) ==
        doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(soft_f1_loss(std::vector<double>{0, 0}, std::vector<double>{0, 0}) == 0.0);
  dg::Tape t;
  CHECK(soft_f1_loss(t.constant({0.5, 0.5}), std::vector<double>{1, 0}).scalar() ==
        doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(soft_f1_loss(t.constant({0, 0}), std::vector<double>{0, 0}).scalar() == 0.0);
}

TEST_CASE("soft F1 loss range and minimum") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = 1 + trial % 8;
    std::vector<double> y(n), target(n);
    for (int i = 0; i < n; ++i) {
      y[i] = trial % 3 ? u(rng) : double(rng() % 2);
      target[i] = double(rng() % 2);
    }
    const double l = soft_f1_loss(y, target);
    CHECK(l >= -1.0 - 1e-15);
    CHECK(l <= 0.0);
    const bool nonempty = std::accumulate(target.begin(), target.end(), 0.0) > 0;
    if (y == target && nonempty) CHECK(l == doctest::Approx(-1.0).epsilon(1e-15));
    if (l <= -1.0 + 1e-12) CHECK((y == target && nonempty));
  }
}

TEST_CASE("soft F1 loss gradient") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + trial % 7;
    std::vector<double> y(n), target(n);
    for (int i = 0; i < n; ++i) {
      y[i] = u(rng);
      target[i] = double(rng() % 2);
    }
    dg::Tape t;
    dg::Var yv = t.variable(y);
    t.backward(soft_f1_loss(yv, target));
    std::vector<double> a(t.adjoint(yv).begin(), t.adjoint(yv).end());
    auto f = [&](const std::vector<double>& x) { return soft_f1_loss(x, target); };
    CHECK(oracle::rel_error(a, oracle::numeric_gradient(f, y), 1e-8) < 1e-5);
  }
}

TEST_CASE("cross-entropy loss") {
  dg::Tape t;
  const double ce = cross_entropy_loss(t.constant({0.8, 0.25}), std::vector<double>{1, 0}).scalar();
  CHECK(ce == doctest::Approx(-(std::log(0.8) + std::log(0.75)) / 2.0).epsilon(1e-12));
  // Saturated and out-of-box inputs stay finite.
  CHECK(std::isfinite(cross_entropy_loss(t.constant({0.0, 1.0, 1.02, -0.01}),
                                         std::vector<double>{1, 0, 0, 1})
                          .scalar()));
  CHECK(parse_single_step_loss(to_string(SingleStepLoss::cross_entropy)) ==
        SingleStepLoss::cross_entropy);
  CHECK_THROWS(parse_single_step_loss("hinge"));
}

TEST_CASE("weighted trajectory loss examples") {
  const std::vector<double> target{1, 0, 1};
  const std::vector<double> perfect{1, 0, 1};
  const std::vector<double> half{0.5, 0.5, 0.5};

  SUBCASE("T = 1 is the single-step loss") {
    const double l1 = soft_f1_loss(half, target);
    CHECK(trajectory_loss({half, half}, target, SingleStepLoss::soft_f1) ==
          doctest::Approx(l1).epsilon(1e-12));
    CHECK(std::abs(weighted_trajectory_loss(std::vector<double>{l1}) - l1) < 1e-12);
  }
  SUBCASE("T = 2 with both steps perfect") {
    CHECK(std::abs(trajectory_loss({half, perfect, perfect}, target, SingleStepLoss::soft_f1) -
                   -0.75) < 1e-12);
    CHECK(std::abs(weighted_trajectory_loss(std::vector<double>{-1, -1}) - -0.75) < 1e-12);
  }
  SUBCASE("all-perfect trajectories give -H_T / T") {
    for (int T = 1; T <= 20; ++T) {
      std::vector<std::vector<double>> states(T + 1, perfect);
      states[0] = half;  // y_0 takes no part in the sum
      CAPTURE(T);
      CHECK(std::abs(trajectory_loss(states, target, SingleStepLoss::soft_f1) - -harmonic(T) / T) <
            1e-12);
    }
  }
  SUBCASE("only y_0") {
    CHECK(trajectory_loss({half}, target, SingleStepLoss::soft_f1) ==
          doctest::Approx(soft_f1_loss(half, target)).epsilon(1e-12));
  }
  SUBCASE("empty trajectory") {
    CHECK_THROWS(weighted_trajectory_loss(std::span<const double>{}));
    CHECK_THROWS(weighted_trajectory_loss(std::span<const dg::Var>{}, target,
                                          SingleStepLoss::soft_f1));
  }
}

TEST_CASE("weighted trajectory loss is bounded by its worst step") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 0.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> steps(1 + trial % 20);
    for (double& s : steps) s = u(rng);
    double worst = 0.0;
    for (double s : steps) worst = std::max(worst, std::abs(s));
    // Weights are 1/(T(T-t+1)); recompute them independently.
    const int T = int(steps.size());
    double expect = 0.0;
    for (int t = 1; t <= T; ++t) expect += steps[t - 1] / (double(T) * (T - t + 1));
    const double l = weighted_trajectory_loss(steps);
    CHECK(std::abs(l - expect) < 1e-12);
    CHECK(std::abs(l) <= worst + 1e-15);
  }
}

TEST_CASE("AdaGrad") {
  std::vector<Tensor> params{Tensor{"a", 1, 1, {0.0}}, Tensor{"b", 2, 1, {1.0, 2.0}}};
  AdaGrad opt(0.1);
  opt.step(params, {{1.0}, {0.0, 0.0}});
  CHECK(std::abs(params[0].data[0] - -0.1 / (1.0 + 1e-8)) < 1e-12);
  CHECK(params[1].data == std::vector<double>{1.0, 2.0});
  CHECK(opt.accumulators()[1] == std::vector<double>{0.0, 0.0});
  const double before = params[0].data[0];
  opt.step(params, {{1.0}, {0.0, 0.0}});
  CHECK(std::abs((params[0].data[0] - before) - -0.1 / (std::sqrt(2.0) + 1e-8)) < 1e-12);
  CHECK(opt.accumulators()[0][0] == 2.0);
}

TEST_CASE("AdaGrad accumulators never decrease") {
  std::mt19937_64 rng(4);
  std::vector<Tensor> params{Tensor{"w", 3, 2, std::vector<double>(6, 0.0)}};
  AdaGrad opt(0.05);
  std::vector<double> prev(6, 0.0);
  for (int step = 0; step < 200; ++step) {
    auto g = oracle::normal_vector(rng, 6, 3.0);
    if (step % 5 == 0) g[step % 6] = 0.0;
    opt.step(params, {g});
    const auto& acc = opt.accumulators()[0];
    for (int i = 0; i < 6; ++i) {
      CHECK(acc[i] >= 0.0);
      CHECK(acc[i] >= prev[i]);
      CHECK(std::abs(acc[i] - (prev[i] + g[i] * g[i])) < 1e-9 * std::max(1.0, acc[i]));
    }
    prev = acc;
  }
}

TEST_CASE("metrics records round trip") {
  const MetricsRecord r{7, "dev", -0.5123456789, 0.75, 0.5, 1.25};
  const MetricsRecord back = MetricsRecord::parse(r.to_line());
  CHECK(back.epoch == 7);
  CHECK(back.split == "dev");
  CHECK(back.loss == doctest::Approx(r.loss).epsilon(1e-9));
  CHECK(back.f1 == 0.75);
  CHECK(back.f1_macro == 0.5);
  CHECK(back.card_mse == 1.25);
  CHECK(r.to_line().rfind("epoch=7\tsplit=dev\tloss=", 0) == 0);
  CHECK_THROWS(MetricsRecord::parse("epoch=x"));
}

TEST_CASE("training loop") {
  const Dataset data = small_synthetic(120, 5);
  const SplitSpec spec{0.75, 0.25, 0.0, 2};
  const Splits s = split_dataset(data, spec);
  const ScoreModel init = ScoreModel::initialize(small_arch(data), 9);
  InferenceConfig inf;
  inf.steps = 3;
  inf.step_size = 0.05;
  LossConfig loss;
  TrainOptions opt;
  opt.epochs = 3;
  opt.batch_size = 16;
  opt.learning_rate = 0.05;
  opt.seed = 4;

  SUBCASE("zero epochs leave the model unchanged") {
    opt.epochs = 0;
    const TrainResult r = train(s.train, &s.dev, init, inf, loss, opt);
    CHECK(r.model == init);
    CHECK(r.best_epoch == 0);
    REQUIRE(r.log.size() == 2);
    CHECK(r.log[0].split == "final-train");
    CHECK(r.log[1].split == "final-dev");
  }
  SUBCASE("same seed, same log and model") {
    std::vector<std::string> streamed;
    const TrainResult a = train(s.train, &s.dev, init, inf, loss, opt,
                                [&](const MetricsRecord& m) { streamed.push_back(m.to_line()); });
    const TrainResult b = train(s.train, &s.dev, init, inf, loss, opt);
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
      CHECK(a.log[i].to_line() == b.log[i].to_line());
      CHECK(streamed[i] == a.log[i].to_line());
    }
    CHECK(a.model == b.model);
    CHECK_FALSE(a.model == init);
    // train and dev records per epoch, then the two final records
    CHECK(a.log.size() == std::size_t(2 * opt.epochs + 2));
  }
  SUBCASE("the returned model reproduces the final records") {
    const TrainResult r = train(s.train, &s.dev, init, inf, loss, opt);
    const EvalReport dev = evaluate(r.model, s.dev, inf, loss, opt.decode,
                                    cardinality_stats(s.train), opt.seed);
    CHECK(r.log.back().split == "final-dev");
    CHECK(r.log.back().f1 == dev.f1.example_averaged);
  }
  SUBCASE("dimension mismatch") {
    Architecture a = small_arch(data);
    a.labels += 1;
    CHECK_THROWS_AS(train(s.train, &s.dev, ScoreModel::initialize(a, 1), inf, loss, opt),
                    std::invalid_argument);
  }
  SUBCASE("non-finite loss names the example") {
    Dataset bad = s.train;
    bad.examples[3].x.value[0] = std::numeric_limits<double>::infinity();
    opt.batch_size = 1;
    CHECK_THROWS_WITH_AS(train(bad, nullptr, init, inf, loss, opt),
                         doctest::Contains("training example 3"), NumericalError);
  }
}

TEST_CASE("dev F1 improves with training on the planted task") {
  SyntheticSpec spec;
  spec.examples = 600;
  spec.labels = 10;
  spec.features = 40;
  spec.rule = CardinalityRule{3, 14, 1, 4};
  const Dataset data = generate_synthetic(spec, 11);
  const Splits s = split_dataset(data, SplitSpec{0.8, 0.2, 0.0, 3});
  const ScoreModel init = ScoreModel::initialize(small_arch(data, 16), 3);
  InferenceConfig inf;
  inf.steps = 5;
  inf.step_size = 0.01;
  LossConfig loss;
  TrainOptions opt;
  opt.epochs = 20;
  opt.learning_rate = 0.03;
  opt.log_train_metrics = false;
  const CardinalityStats stats = cardinality_stats(s.train);
  const double before =
      evaluate(init, s.dev, inf, loss, opt.decode, stats, 1).f1.example_averaged;
  const TrainResult r = train(s.train, &s.dev, init, inf, loss, opt);
  const double after = r.log.back().f1;
  MESSAGE("dev F1 " << before << " -> " << after);
  CHECK(after > before + 0.1);
}

TEST_CASE("cardinality predictor beats the constant baseline") {
  SyntheticSpec spec;
  spec.examples = 800;
  spec.labels = 10;
  spec.features = 40;
  spec.rule = CardinalityRule{3, 22, 1, 5};
  const Dataset data = generate_synthetic(spec, 12);
  const Splits s = split_dataset(data, SplitSpec{0.8, 0.2, 0.0, 4});
  Architecture a = small_arch(data, 16);
  const ScoreModel init = ScoreModel::initialize(a, 5);
  const ScoreModel trained = train_cardinality_predictor(s.train, init, 30, 32, 0.1, 6);
  // Only the cardinality network moves.
  for (std::size_t i = 0; i < init.params().size(); ++i) {
    const Tensor& t = init.params()[i];
    if (ScoreModel::group_of(t.name) != ParamGroup::cardinality) {
      CHECK(trained.params()[i].data == t.data);
    }
  }
  std::vector<double> pred, target;
  for (const Example& ex : s.dev.examples) {
    pred.push_back(predict_cardinality(trained, ex.x.view(), CardinalityMode::argmax));
    target.push_back(ex.cardinality());
  }
  const CardinalityMse mse = eval_cardinality_mse(pred, target, cardinality_stats(s.train), 7);
  MESSAGE("mse h=" << mse.predictor << " const=" << mse.constant << " rand=" << mse.random);
  CHECK(mse.predictor < mse.constant);
  CHECK(mse.constant < mse.random);
}

TEST_CASE("gradient checks") {
  const Dataset data = small_synthetic(10, 8);
  const Example& ex = data.examples[2];

  SUBCASE("smooth toy model") {
    const ScoreModel m = ScoreModel::initialize(small_arch(data), 2);
    InferenceConfig inf;
    inf.variant = Variant::unary;
    inf.steps = 0;
    LossConfig loss{SingleStepLoss::cross_entropy, 1.0};
    const GradcheckReport r = gradcheck(m, ex, inf, loss);
    CHECK(r.max_rel_error < 1e-6);
  }
  SUBCASE("full projected pipeline") {
    for (std::uint64_t seed : {1, 2, 3}) {
      const ScoreModel m = ScoreModel::initialize(small_arch(data), seed);
      InferenceConfig inf;
      inf.steps = 3;
      inf.dykstra_rounds = 2;
      const GradcheckReport r = gradcheck(m, ex, inf, LossConfig{});
      CAPTURE(seed);
      CHECK(r.max_rel_error < 1e-3);
      CHECK(r.groups.size() == 4);
      for (const GroupError& g : r.groups) CHECK(g.checked > 0);
    }
  }
  SUBCASE("corrupted backward is caught") {
    const ScoreModel m = ScoreModel::initialize(small_arch(data), 1);
    InferenceConfig inf;
    inf.steps = 3;
    GradcheckOptions o;
    o.corrupt_backward = true;
    CHECK(gradcheck(m, ex, inf, LossConfig{}, o).max_rel_error > 0.1);
  }
}
