#include "cardnet/projections.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace cardnet::proj {

namespace {

void require_positive_z(double z, const char* op) {
  if (!(z > 0.0)) {
    throw std::invalid_argument(std::string(op) + ": z must be positive, got " +
                                std::to_string(z));
  }
}

std::vector<double> iota_vector(int n, int first) {
  std::vector<double> v(n);
  for (int i = 0; i < n; ++i) v[i] = first + i;
  return v;
}

double softsign(double x) { return x / (1.0 + std::abs(x)); }

std::vector<double> softmax(std::vector<double> a) {
  const double m = *std::max_element(a.begin(), a.end());
  double s = 0.0;
  for (double& x : a) {
    x = std::exp(x - m);
    s += x;
  }
  for (double& x : a) x /= s;
  return a;
}

}  // namespace

void CappedSimplexSpec::validate() const {
  if (labels < 1) throw std::invalid_argument("capped simplex: no labels");
  if (!(z >= 0.0) || z > labels) {
    throw std::invalid_argument("capped simplex: z = " + std::to_string(z) +
                                " outside [0, " + std::to_string(labels) + "]");
  }
}

ProjectionResult diagnose(std::vector<double> y, double z, int iterations) {
  ProjectionResult r;
  double s = 0.0, box = 0.0;
  for (double x : y) {
    s += x;
    box = std::max({box, x - 1.0, -x});
  }
  r.residual_sum = std::abs(s - z);
  r.residual_box = box;
  r.iterations = iterations;
  r.y = std::move(y);
  return r;
}

// ---- box ------------------------------------------------------------------

std::vector<double> project_box_upper(std::span<const double> y) {
  std::vector<double> out(y.begin(), y.end());
  for (double& x : out) x = std::min(x, 1.0);
  return out;
}

dg::Var project_box_upper(dg::Var y) { return dg::min1(y); }

// ---- simplex --------------------------------------------------------------

std::vector<double> project_simplex_exact(std::span<const double> v, double z) {
  require_positive_z(z, "project_simplex_exact");
  if (v.empty()) throw std::invalid_argument("project_simplex_exact: empty input");
  std::vector<double> mu(v.begin(), v.end());
  std::sort(mu.begin(), mu.end(), std::greater<>());
  // rho = largest j with mu_j - (cumsum_j - z) / j > 0; j = 1 always qualifies.
  double cs = 0.0, theta = mu[0] - z;
  for (std::size_t j = 0; j < mu.size(); ++j) {
    cs += mu[j];
    const double t = (cs - z) / static_cast<double>(j + 1);
    if (mu[j] - t > 0.0) theta = t;
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::max(v[i] - theta, 0.0);
  return out;
}

dg::Var project_simplex_soft(dg::Var v, dg::Var z, double sharpness) {
  using namespace dg;
  require_positive_z(z.scalar(), "project_simplex_soft");
  const int n = static_cast<int>(v.size());
  const std::vector<double> index = iota_vector(n, 1);
  Tape& tape = v.tape();

  Var mu = sort_desc(v).values;
  Var mu_bar = cumsum(mu);
  // delta_j > 0 exactly when j satisfies the pivot condition of the sort-based
  // projection; the softmax then concentrates on the largest such j.
  Var delta = softsign(scale(sub(mul_const(mu, index), sub_scalar(mu_bar, z)), sharpness));
  Var rho = softmax(scale(mul_const(delta, index), sharpness));
  Var theta = div(sub(dot(mu_bar, rho), z), dot(tape.constant(index), rho));
  return max0(sub_scalar(v, theta));
}

dg::Var project_simplex_soft(dg::Var v, double z, double sharpness) {
  return project_simplex_soft(v, v.tape().scalar(z), sharpness);
}

// ---- Dykstra ----------------------------------------------------------------

ProjectionResult project_capped_dykstra(std::span<const double> v,
                                        const CappedSimplexSpec& spec,
                                        int rounds, double sharpness,
                                        SimplexMode mode) {
  spec.validate();
  if (static_cast<int>(v.size()) != spec.labels) {
    throw std::invalid_argument("project_capped_dykstra: input has " +
                                std::to_string(v.size()) + " entries, spec expects " +
                                std::to_string(spec.labels));
  }
  if (rounds < 1) throw std::invalid_argument("project_capped_dykstra: rounds must be >= 1");
  if (spec.z == 0.0) {
    return diagnose(std::vector<double>(v.size(), 0.0), spec.z, 0);
  }

  if (mode == SimplexMode::soft) {
    dg::Tape tape;
    dg::Var y = project_capped_dykstra(
        tape.constant(std::vector<double>(v.begin(), v.end())), tape.scalar(spec.z),
        DykstraOptions{rounds, sharpness, false});
    auto yv = y.value();
    return diagnose(std::vector<double>(yv.begin(), yv.end()), spec.z, rounds);
  }

  const std::size_t n = v.size();
  std::vector<double> y(v.begin(), v.end()), p(n, 0.0), q(n, 0.0), tmp(n);
  for (int r = 0; r < rounds; ++r) {
    for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + p[i];
    std::vector<double> y_box = project_box_upper(tmp);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = tmp[i] - y_box[i];
      tmp[i] = y_box[i] + q[i];
    }
    y = project_simplex_exact(tmp, spec.z);
    for (std::size_t i = 0; i < n; ++i) q[i] = tmp[i] - y[i];
  }
  return diagnose(std::move(y), spec.z, rounds);
}

dg::Var project_capped_dykstra(dg::Var v, dg::Var z, const DykstraOptions& options) {
  using namespace dg;
  if (options.rounds < 1) {
    throw std::invalid_argument("project_capped_dykstra: rounds must be >= 1");
  }
  Tape& tape = v.tape();
  const int n = static_cast<int>(v.size());
  const double zv = z.scalar();
  if (!(zv >= 0.0) || zv > n) {
    throw std::invalid_argument("project_capped_dykstra: z = " + std::to_string(zv) +
                                " outside [0, " + std::to_string(n) + "]");
  }
  if (zv == 0.0) return tape.constant(std::vector<double>(n, 0.0));

  Var y = v;
  Var p = tape.constant(std::vector<double>(n, 0.0));
  Var q = tape.constant(std::vector<double>(n, 0.0));
  for (int r = 0; r < options.rounds; ++r) {
    Var shifted = add(y, p);
    Var y_box = project_box_upper(shifted);
    p = sub(shifted, y_box);
    Var corrected = add(y_box, q);
    y = project_simplex_soft(corrected, z, options.sharpness);
    q = sub(corrected, y);
    if (options.detach_residuals) {
      p = detach(p);
      q = detach(q);
    }
  }
  return y;
}

// ---- exact capped projection ---------------------------------------------

CappedSolution solve_capped(std::span<const double> v, const CappedSimplexSpec& spec) {
  spec.validate();
  const int n = static_cast<int>(v.size());
  if (n != spec.labels) {
    throw std::invalid_argument("project_capped_exact: input has " + std::to_string(n) +
                                " entries, spec expects " + std::to_string(spec.labels));
  }
  const double z = spec.z;
  const double vmax = *std::max_element(v.begin(), v.end());
  const double vmin = *std::min_element(v.begin(), v.end());
  if (z == 0.0) return {std::vector<double>(n, 0.0), vmax};
  if (z == static_cast<double>(n)) return {std::vector<double>(n, 1.0), vmin - 1.0};

  // g(lambda) = sum_i clamp(v_i - lambda, 0, 1) is continuous, non-increasing
  // and linear between consecutive breakpoints {v_i - 1} u {v_i}. Crossing
  // v_i - 1 moves entry i from the upper bound to the free set, crossing v_i
  // moves it from the free set to the lower bound.
  struct Event {
    double at;
    int index;
    bool leaves_upper;
  };
  std::vector<Event> events;
  events.reserve(2 * n);
  for (int i = 0; i < n; ++i) {
    events.push_back({v[i] - 1.0, i, true});
    events.push_back({v[i], i, false});
  }
  std::sort(events.begin(), events.end(),
            [](const Event& a, const Event& b) { return a.at < b.at; });

  // Segment state to the left of the current breakpoint.
  int ones = n, free_count = 0;
  double free_sum = 0.0;
  auto g_at = [&](double lambda) { return ones + free_sum - free_count * lambda; };

  double lambda = vmax;
  std::size_t k = 0;
  double prev = events.front().at;
  while (k < events.size()) {
    const double at = events[k].at;
    const double g = g_at(at);
    if (g <= z) {
      if (free_count > 0) {
        // Closed form on the bracketing segment: entries above the segment are
        // saturated at one, entries in it are v_i - lambda.
        lambda = (free_sum - (z - ones)) / free_count;
        lambda = std::clamp(lambda, prev, at);
      } else {
        lambda = 0.5 * (prev + at);
      }
      // A flat segment starting here keeps g == z; centre lambda inside it.
      if (g == z) {
        std::size_t j = k;
        int o = ones, f = free_count;
        double fs = free_sum;
        while (j < events.size() && events[j].at == at) {
          const Event& e = events[j++];
          if (e.leaves_upper) { --o; ++f; fs += v[e.index]; }
          else { --f; fs -= v[e.index]; }
        }
        if (f == 0 && j < events.size()) lambda = 0.5 * (at + events[j].at);
      }
      break;
    }
    while (k < events.size() && events[k].at == at) {
      const Event& e = events[k++];
      if (e.leaves_upper) {
        --ones;
        ++free_count;
        free_sum += v[e.index];
      } else {
        --free_count;
        free_sum -= v[e.index];
      }
    }
    prev = at;
  }

  std::vector<double> y(n);
  for (int i = 0; i < n; ++i) y[i] = std::clamp(v[i] - lambda, 0.0, 1.0);
  return {std::move(y), lambda};
}

std::vector<double> project_capped_exact(std::span<const double> v,
                                         const CappedSimplexSpec& spec) {
  return solve_capped(v, spec).y;
}

// ---- fast soft capped projection ----------------------------------------------

namespace {

// Soft counts / partial sums at threshold lambda. Index 0 stands for "no
// entry", so the index-scaled softsign scores are prefixed with a zero.
struct SoftBoundary {
  double count_upper, count_free_end, sum_upper, sum_free_end;
};

SoftBoundary soft_boundary(const std::vector<double>& mu,
                           const std::vector<double>& mu_bar0,
                           const std::vector<double>& index0, double lambda,
                           double sharpness) {
  const std::size_t n = mu.size();
  std::vector<double> a1(n + 1, 0.0), a2(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    a1[i + 1] = sharpness * index0[i + 1] * softsign(sharpness * (mu[i] - lambda - 1.0));
    a2[i + 1] = sharpness * index0[i + 1] * softsign(sharpness * (mu[i] - lambda));
  }
  auto r1 = softmax(std::move(a1));
  auto r2 = softmax(std::move(a2));
  SoftBoundary b{0, 0, 0, 0};
  for (std::size_t i = 0; i <= n; ++i) {
    b.count_upper += r1[i] * index0[i];
    b.count_free_end += r2[i] * index0[i];
    b.sum_upper += r1[i] * mu_bar0[i];
    b.sum_free_end += r2[i] * mu_bar0[i];
  }
  return b;
}

}  // namespace

dg::Var project_capped_fast_soft(dg::Var v, dg::Var z, int iterations, double sharpness) {
  using namespace dg;
  if (iterations < 1) {
    throw std::invalid_argument("project_capped_fast_soft: iterations must be >= 1");
  }
  Tape& tape = v.tape();
  const int n = static_cast<int>(v.size());
  const double zv = z.scalar();
  CappedSimplexSpec{n, zv}.validate();
  if (zv == 0.0) return tape.constant(std::vector<double>(n, 0.0));
  if (zv == static_cast<double>(n)) return tape.constant(std::vector<double>(n, 1.0));

  Sorted sorted = sort_desc(v);
  Var mu = sorted.values;
  Var mu_bar0 = concat(tape.scalar(0.0), cumsum(mu));
  const std::vector<double> index0 = iota_vector(n + 1, 0);

  // Bisection for the root of G(lambda) = z_j(lambda) - z on plain buffers.
  const auto muv = mu.value();
  const std::vector<double> mu_vals(muv.begin(), muv.end());
  const auto mbv = mu_bar0.value();
  const std::vector<double> mu_bar_vals(mbv.begin(), mbv.end());
  double lo = mu_vals.back() - 1.0, hi = mu_vals.front();
  for (int j = 0; j < iterations; ++j) {
    const double lambda = 0.5 * (lo + hi);
    const SoftBoundary b = soft_boundary(mu_vals, mu_bar_vals, index0, lambda, sharpness);
    const double zj = b.count_upper + (b.sum_free_end - b.sum_upper) -
                      (b.count_free_end - b.count_upper) * lambda;
    if (zj > zv) lo = lambda;
    else hi = lambda;
  }
  const double root = 0.5 * (lo + hi);

  // lambda = root - G(root) / G'(root) with G recorded on the tape and G'
  // held constant: the value is one Newton refinement of the root and the
  // gradient is the implicit derivative -dG / G'. With hard one-hots this
  // reduces to the closed-form threshold of the bracketing segment.
  auto excess = [&](Var mu_, Var mu_bar0_, Var lambda_, Var z_) {
    Tape& t = mu_.tape();
    auto one_hot = [&](double offset) {
      Var d = softsign(scale(sub(mu_, broadcast(shift(lambda_, offset), n)), sharpness));
      Var scores = concat(t.scalar(0.0), mul_const(d, std::span(index0).subspan(1)));
      return softmax(scale(scores, sharpness));
    };
    Var rho_upper = one_hot(1.0);
    Var rho_free_end = one_hot(0.0);
    Var idx = t.constant(index0);
    Var count_upper = dot(rho_upper, idx);
    Var free_count = sub(dot(rho_free_end, idx), count_upper);
    Var free_sum = sub(dot(rho_free_end, mu_bar0_), dot(rho_upper, mu_bar0_));
    return sub(add(count_upper, sub(free_sum, mul(free_count, lambda_))), z_);
  };

  double slope = 0.0;
  {
    Tape local;
    Var lam = local.variable(std::vector<double>{root});
    Var g = excess(local.constant(mu_vals), local.constant(mu_bar_vals), lam,
                   local.scalar(zv));
    local.backward(g);
    slope = local.adjoint(lam)[0];
  }
  if (!(std::abs(slope) > 1e-9)) {
    // Flat excess: every threshold in the bracket gives the same projection.
    return clip01(sub(v, broadcast(tape.scalar(root), n)));
  }
  Var g = excess(mu, mu_bar0, tape.scalar(root), z);
  Var lambda = sub(tape.scalar(root), scale(g, 1.0 / slope));
  return clip01(sub_scalar(v, lambda));
}

dg::Var project_capped_fast_soft(dg::Var v, const CappedSimplexSpec& spec,
                                 int iterations, double sharpness) {
  return project_capped_fast_soft(v, v.tape().scalar(spec.z), iterations, sharpness);
}

// ---- matrix extension -----------------------------------------------------

Matrix project_matrix_rows_cols(const Matrix& y, std::span<const double> z, int rounds) {
  if (static_cast<int>(z.size()) != y.cols) {
    throw std::invalid_argument("project_matrix_rows_cols: " + std::to_string(z.size()) +
                                " column totals for " + std::to_string(y.cols) + " columns");
  }
  if (rounds < 1) throw std::invalid_argument("project_matrix_rows_cols: rounds must be >= 1");
  double total = 0.0;
  for (double zj : z) {
    if (!(zj >= 0.0)) throw std::invalid_argument("project_matrix_rows_cols: negative column total");
    total += zj;
  }
  if (std::abs(total - y.rows) > 1e-9 * std::max(1, y.rows)) {
    throw std::invalid_argument("project_matrix_rows_cols: column totals sum to " +
                                std::to_string(total) + " but there are " +
                                std::to_string(y.rows) + " rows");
  }

  auto project_rows = [](Matrix m) {
    std::vector<double> row(m.cols);
    for (int i = 0; i < m.rows; ++i) {
      for (int j = 0; j < m.cols; ++j) row[j] = m(i, j);
      auto p = project_simplex_exact(row, 1.0);
      for (int j = 0; j < m.cols; ++j) m(i, j) = p[j];
    }
    return m;
  };
  auto project_cols = [&z](Matrix m) {
    std::vector<double> col(m.rows);
    for (int j = 0; j < m.cols; ++j) {
      if (z[j] == 0.0) {
        for (int i = 0; i < m.rows; ++i) m(i, j) = 0.0;
        continue;
      }
      for (int i = 0; i < m.rows; ++i) col[i] = m(i, j);
      auto p = project_simplex_exact(col, z[j]);
      for (int i = 0; i < m.rows; ++i) m(i, j) = p[i];
    }
    return m;
  };

  const std::size_t n = y.data.size();
  Matrix cur = y, p(y.rows, y.cols), q(y.rows, y.cols), tmp(y.rows, y.cols);
  for (int r = 0; r < rounds; ++r) {
    for (std::size_t k = 0; k < n; ++k) tmp.data[k] = cur.data[k] + p.data[k];
    Matrix row_proj = project_rows(tmp);
    for (std::size_t k = 0; k < n; ++k) {
      p.data[k] = tmp.data[k] - row_proj.data[k];
      tmp.data[k] = row_proj.data[k] + q.data[k];
    }
    cur = project_cols(tmp);
    for (std::size_t k = 0; k < n; ++k) q.data[k] = tmp.data[k] - cur.data[k];
  }
  return cur;
}

}  // namespace cardnet::proj
