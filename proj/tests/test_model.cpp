#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "cardnet/model.hpp"
#include "oracles.hpp"

using namespace cardnet;

namespace {

Architecture small_arch(bool sc = false) {
  Architecture a;
  a.features = 7;
  a.labels = 5;
  a.hidden_feature = 6;
  a.feature_dim = 4;
  a.hidden_global = 6;
  a.hidden_card = 5;
  a.max_card = 4;
  a.sc_weights = sc;
  return a;
}

struct Sparse {
  std::vector<int> index;
  std::vector<double> value;
  dg::SparseView view() const { return {index, value}; }
};

Sparse random_input(std::mt19937_64& rng, int d) {
  Sparse s;
  std::uniform_real_distribution<double> u(0.2, 1.5);
  for (int j = 0; j < d; ++j) {
    if (rng() % 2) {
      s.index.push_back(j);
      s.value.push_back(u(rng));
    }
  }
  return s;
}

std::vector<double> values(dg::Var v) { return {v.value().begin(), v.value().end()}; }

// Randomizes every parameter, biases and indicator weights included.
ScoreModel randomized(const Architecture& a, std::uint64_t seed) {
  ScoreModel m = ScoreModel::zeros(a);
  std::mt19937_64 rng(seed);
  for (Tensor& t : m.params()) t.data = oracle::normal_vector(rng, int(t.data.size()), 0.5);
  return m;
}

}  // namespace

TEST_CASE("architecture validation") {
  Architecture a = small_arch();
  CHECK_NOTHROW(a.validate());
  a.labels = 0;
  CHECK_THROWS(a.validate());
  a = small_arch();
  a.max_card = -1;
  CHECK_THROWS(a.validate());
}

TEST_CASE("initialization is deterministic and biases start at zero") {
  const Architecture a = small_arch(true);
  const ScoreModel m1 = ScoreModel::initialize(a, 11);
  const ScoreModel m2 = ScoreModel::initialize(a, 11);
  const ScoreModel m3 = ScoreModel::initialize(a, 12);
  CHECK(m1 == m2);
  CHECK_FALSE(m1 == m3);
  for (const Tensor& t : m1.params()) {
    CAPTURE(t.name);
    for (double x : t.data) CHECK(std::isfinite(x));
    if (t.name.find("_b") != std::string::npos || t.name == "sc_w") {
      for (double x : t.data) CHECK(x == 0.0);
    }
  }
  const Tensor& w = m1.param("f_w1");
  const double bound = std::sqrt(6.0 / (a.features + a.hidden_feature));
  for (double x : w.data) CHECK(std::abs(x) <= bound);
  CHECK_THROWS_AS(m1.param("nope"), std::out_of_range);
}

TEST_CASE("parameter groups") {
  CHECK(ScoreModel::group_of("f_w1") == ParamGroup::feature);
  CHECK(ScoreModel::group_of("u_b") == ParamGroup::unary);
  CHECK(ScoreModel::group_of("g_w2") == ParamGroup::global);
  CHECK(ScoreModel::group_of("h_b2") == ParamGroup::cardinality);
  CHECK(ScoreModel::group_of("sc_w") == ParamGroup::indicator);
  CHECK(group_name(ParamGroup::global) == "global");
}

TEST_CASE("unary scores") {
  const Architecture a = small_arch();
  Sparse x{{0, 3}, {1.0, 2.0}};

  SUBCASE("zero weights give the bias") {
    ScoreModel m = ScoreModel::zeros(a);
    m.param("u_b").data = {0.1, -0.2, 0.3, 0.0, 5.0};
    dg::Tape t;
    CHECK(values(unary_scores(bind(t, m, false), x.view())) == m.param("u_b").data);
  }

  SUBCASE("hand-computed toy weights") {
    ScoreModel m = ScoreModel::zeros(a);
    // Hidden unit k copies feature k, the feature layer and unary map pick
    // hidden units 0 and 3.
    auto& w1 = m.param("f_w1");
    for (int k = 0; k < a.hidden_feature; ++k) w1.data[k * a.features + k] = 1.0;
    m.param("f_b1").data[3] = -0.5;
    auto& w2 = m.param("f_w2");
    w2.data[0 * a.hidden_feature + 0] = 1.0;
    w2.data[1 * a.hidden_feature + 3] = 1.0;
    auto& u = m.param("u_w");
    u.data[0 * a.feature_dim + 0] = 2.0;
    u.data[1 * a.feature_dim + 1] = -1.0;
    u.data[2 * a.feature_dim + 0] = 1.0;
    u.data[2 * a.feature_dim + 1] = 1.0;
    dg::Tape t;
    // h0 = 1, h3 = relu(2 - 0.5) = 1.5
    const auto c = values(unary_scores(bind(t, m, false), x.view()));
    CHECK(c == std::vector<double>{2.0, -1.5, 2.5, 0.0, 0.0});
  }

  SUBCASE("out-of-range feature index") {
    ScoreModel m = ScoreModel::zeros(a);
    Sparse bad{{7}, {1.0}};
    dg::Tape t;
    CHECK_THROWS(unary_scores(bind(t, m, false), bad.view()));
  }
}

TEST_CASE("unary score gradient matches finite differences") {
  const Architecture a = small_arch();
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    ScoreModel m = randomized(a, 100 + trial);
    Sparse x = random_input(rng, a.features);
    dg::Tape t;
    BoundModel b = bind(t, m, true);
    t.backward(dg::sum(unary_scores(b, x.view())));
    for (const char* name : {"f_w1", "f_b1", "f_w2", "f_b2", "u_w", "u_b"}) {
      CAPTURE(std::string(name));
      auto adj = t.adjoint(b[name]);
      std::vector<double> analytic(adj.begin(), adj.end());
      auto f = [&](const std::vector<double>& p) {
        ScoreModel mm = m;
        mm.param(name).data = p;
        dg::Tape tt;
        auto c = values(unary_scores(bind(tt, mm, false), x.view()));
        return std::accumulate(c.begin(), c.end(), 0.0);
      };
      CHECK(oracle::rel_error(analytic, oracle::numeric_gradient(f, m.param(name).data), 1e-6) <
            1e-4);
    }
  }
}

TEST_CASE("unary part is linear in y") {
  const Architecture a = small_arch();
  ScoreModel m = randomized(a, 3);
  std::mt19937_64 rng(6);
  Sparse x = random_input(rng, a.features);
  dg::Tape t;
  auto c = values(unary_scores(bind(t, m, false), x.view()));
  auto y1 = oracle::normal_vector(rng, a.labels);
  auto y2 = oracle::normal_vector(rng, a.labels);
  auto s = [&](const std::vector<double>& y) {
    return std::inner_product(c.begin(), c.end(), y.begin(), 0.0);
  };
  std::vector<double> mix(a.labels);
  for (int i = 0; i < a.labels; ++i) mix[i] = 2.0 * y1[i] - 3.0 * y2[i];
  CHECK(s(mix) == doctest::Approx(2.0 * s(y1) - 3.0 * s(y2)).epsilon(1e-12));
}

TEST_CASE("global score") {
  const Architecture a = small_arch();
  SUBCASE("zero weights give the output bias") {
    ScoreModel m = ScoreModel::zeros(a);
    m.param("g_b2").data = {0.7};
    dg::Tape t;
    CHECK(global_score(bind(t, m, false), t.constant({0.3, 0.1, 0.9, 0.0, 1.0})).scalar() == 0.7);
  }
  SUBCASE("y = 0 with zero hidden bias gives the output bias") {
    ScoreModel m = randomized(a, 8);
    std::fill(m.param("g_b1").data.begin(), m.param("g_b1").data.end(), 0.0);
    dg::Tape t;
    CHECK(global_score(bind(t, m, false), t.constant(std::vector<double>(5, 0.0))).scalar() ==
          m.param("g_b2").data[0]);
  }
  SUBCASE("gradient in y matches finite differences and the explicit form") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      ScoreModel m = randomized(a, 200 + trial);
      auto y = oracle::normal_vector(rng, a.labels);
      dg::Tape t;
      BoundModel b = bind(t, m, false);
      dg::Var yv = t.variable(y);
      t.backward(global_score(b, yv));
      std::vector<double> analytic(t.adjoint(yv).begin(), t.adjoint(yv).end());
      auto f = [&](const std::vector<double>& yy) {
        dg::Tape tt;
        return global_score(bind(tt, m, false), tt.constant(yy)).scalar();
      };
      CHECK(oracle::rel_error(analytic, oracle::numeric_gradient(f, y), 1e-6) < 1e-4);
      dg::Tape t2;
      auto explicit_grad = values(global_score_gradient(bind(t2, m, false), t2.constant(y)));
      CHECK(oracle::max_abs_diff(explicit_grad, analytic) < 1e-12);
    }
  }
}

TEST_CASE("global score does not depend on the input") {
  const Architecture a = small_arch();
  ScoreModel m = randomized(a, 10);
  std::mt19937_64 rng(11);
  const auto y = oracle::normal_vector(rng, a.labels);
  std::vector<double> seen;
  for (int k = 0; k < 5; ++k) {
    Sparse x = random_input(rng, a.features);
    dg::Tape t;
    BoundModel b = bind(t, m, false);
    (void)unary_scores(b, x.view());
    seen.push_back(global_score(b, t.constant(y)).scalar());
  }
  for (double s : seen) CHECK(s == seen.front());
}

TEST_CASE("cardinality distribution and prediction") {
  const Architecture a = small_arch();
  SUBCASE("uniform probabilities") {
    ScoreModel m = ScoreModel::zeros(a);
    Sparse x{{1}, {1.0}};
    CHECK(predict_cardinality(m, x.view(), CardinalityMode::expected) ==
          doctest::Approx(2.0).epsilon(1e-14));
    // Ties resolve to the smallest cardinality.
    CHECK(predict_cardinality(m, x.view(), CardinalityMode::argmax) == 0.0);
  }
  SUBCASE("one-hot at 3") {
    dg::Tape t;
    dg::Var p = t.constant({0, 0, 0, 1, 0});
    CHECK(cardinality_from_distribution(p, CardinalityMode::expected).scalar() == 3.0);
    CHECK(cardinality_from_distribution(p, CardinalityMode::argmax).scalar() == 3.0);
  }
  SUBCASE("normalization holds on random models") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 50; ++trial) {
      ScoreModel m = randomized(a, 300 + trial);
      for (double& w : m.param("h_w2").data) w *= 20.0;
      Sparse x = random_input(rng, a.features);
      dg::Tape t;
      BoundModel b = bind(t, m, false);
      auto p = values(cardinality_distribution(b, x.view()));
      CHECK(p.size() == std::size_t(a.max_card + 1));
      for (double q : p) CHECK(q >= 0.0);
      CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-8);
      auto lp = values(cardinality_log_probs(b, x.view()));
      for (std::size_t k = 0; k < p.size(); ++k) {
        if (p[k] > 1e-300) CHECK(std::abs(std::exp(lp[k]) - p[k]) < 1e-12);
      }
    }
  }
  SUBCASE("expected mode is differentiable, argmax mode is detached") {
    ScoreModel m = randomized(a, 13);
    Sparse x{{0, 2}, {1.0, 0.5}};
    dg::Tape t;
    BoundModel b = bind(t, m, true);
    t.backward(cardinality_from_distribution(cardinality_distribution(b, x.view()),
                                             CardinalityMode::expected));
    auto g = t.adjoint(b["h_b2"]);
    CHECK(std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; }));
    dg::Tape t2;
    BoundModel b2 = bind(t2, m, true);
    t2.backward(cardinality_from_distribution(cardinality_distribution(b2, x.view()),
                                              CardinalityMode::argmax));
    auto g2 = t2.adjoint(b2["h_b2"]);
    CHECK(std::all_of(g2.begin(), g2.end(), [](double v) { return v == 0.0; }));
  }
}

TEST_CASE("indicator cardinality score") {
  Architecture a = small_arch(true);
  a.labels = 3;
  a.max_card = 3;
  SUBCASE("I_3 at sum 3 is one half") {
    ScoreModel m = ScoreModel::zeros(a);
    m.param("sc_w").data = {0, 0, 1};
    dg::Tape t;
    // w_3 I_3 (1 - I_4) = 0.5 * (1 - sigmoid(-1))
    const double expect = 0.5 * (1.0 - 1.0 / (1.0 + std::exp(1.0)));
    CHECK(sc_cardinality_score(bind(t, m, false), t.constant({1, 1, 1})).scalar() ==
          doctest::Approx(expect).epsilon(1e-14));
  }
  SUBCASE("zero weights score zero") {
    ScoreModel m = ScoreModel::zeros(a);
    std::mt19937_64 rng(14);
    for (int k = 0; k < 10; ++k) {
      dg::Tape t;
      CHECK(sc_cardinality_score(bind(t, m, false), t.constant(oracle::normal_vector(rng, 3, 2.0)))
                .scalar() == 0.0);
    }
  }
  SUBCASE("gradient in y") {
    std::mt19937_64 rng(15);
    for (int trial = 0; trial < 20; ++trial) {
      ScoreModel m = randomized(a, 400 + trial);
      auto y = oracle::normal_vector(rng, 3);
      dg::Tape t;
      BoundModel b = bind(t, m, false);
      dg::Var yv = t.variable(y);
      t.backward(sc_cardinality_score(b, yv));
      std::vector<double> analytic(t.adjoint(yv).begin(), t.adjoint(yv).end());
      auto f = [&](const std::vector<double>& yy) {
        dg::Tape tt;
        return sc_cardinality_score(bind(tt, m, false), tt.constant(yy)).scalar();
      };
      CHECK(oracle::rel_error(analytic, oracle::numeric_gradient(f, y), 1e-6) < 1e-4);
      dg::Tape t2;
      auto explicit_grad = values(sc_cardinality_gradient(bind(t2, m, false), t2.constant(y)));
      CHECK(oracle::max_abs_diff(explicit_grad, analytic) < 1e-12);
    }
  }
  SUBCASE("missing weights") {
    ScoreModel m = ScoreModel::zeros(small_arch(false));
    dg::Tape t;
    CHECK_THROWS_AS(sc_cardinality_score(bind(t, m, false), t.constant(std::vector<double>(5, 0.5))),
                    std::invalid_argument);
  }
}

TEST_CASE("checkpoint round trip") {
  const ScoreModel m = randomized(small_arch(true), 16);
  const Metadata meta{{"config.seed", "3"}, {"note", "two words"}};
  std::stringstream ss;
  write_checkpoint(ss, m, meta);
  const Checkpoint ck = read_checkpoint(ss);
  CHECK(ck.model == m);
  CHECK(ck.metadata == meta);

  SUBCASE("truncated file") {
    std::string s = ss.str();
    std::istringstream in(s.substr(0, s.size() / 2));
    CHECK_THROWS(read_checkpoint(in));
  }
  SUBCASE("wrong header") {
    std::istringstream in("something 1\n");
    CHECK_THROWS(read_checkpoint(in));
  }
  SUBCASE("unrepresentable metadata") {
    std::stringstream out;
    CHECK_THROWS(write_checkpoint(out, m, {{"bad key", "x"}}));
  }
}
