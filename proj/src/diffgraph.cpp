#include "cardnet/diffgraph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace cardnet::dg {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

void require_same_size(Var a, Var b, const char* op) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(std::string(op) + ": length mismatch (" +
                                std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
}

void require_scalar(Var s, const char* op) {
  if (s.size() != 1) {
    throw std::invalid_argument(std::string(op) +
                                ": expected a single-element operand");
  }
}

// Records y = f(x) elementwise with dy/dx given as a function of (x, y).
template <class F, class D>
Var unary_map(Var x, F f, D dfdx) {
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return x.tape().record(
      x.rows(), x.cols(), std::move(out), {x}, [x, dfdx](Tape& t, int self) {
        auto g = t.adjoint_mut(self);
        auto xv = t.value(x);
        auto yv = t.value(Var(&t, self));
        auto gx = t.adjoint_mut(x.id());
        for (std::size_t i = 0; i < g.size(); ++i) {
          gx[i] += g[i] * dfdx(xv[i], yv[i]);
        }
      });
}

}  // namespace

// ---- Var ------------------------------------------------------------------

std::span<const double> Var::value() const { return tape_->value(*this); }

double Var::scalar() const {
  auto v = value();
  if (v.size() != 1) {
    throw std::invalid_argument("scalar(): node holds " +
                                std::to_string(v.size()) + " elements");
  }
  return v[0];
}

std::size_t Var::size() const { return value().size(); }
int Var::rows() const { return tape_->rows(id_); }
int Var::cols() const { return tape_->cols(id_); }

// ---- Tape -----------------------------------------------------------------

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::check_owner(Var v) const {
  if (!v.valid() || &v.tape() != this || v.id() < 0 ||
      v.id() >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("variable does not belong to this tape");
  }
}

Var Tape::constant(std::vector<double> value) {
  const int n = static_cast<int>(value.size());
  return constant(n, 1, std::move(value));
}

Var Tape::constant(int rows, int cols, std::vector<double> value) {
  require(static_cast<std::size_t>(rows) * cols == value.size(),
          "constant: shape does not match buffer");
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(std::vector<double> value) {
  const int n = static_cast<int>(value.size());
  return variable(n, 1, std::move(value));
}

Var Tape::variable(int rows, int cols, std::vector<double> value) {
  require(static_cast<std::size_t>(rows) * cols == value.size(),
          "variable: shape does not match buffer");
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(value);
  n.needs_grad = true;
  return push(std::move(n));
}

Var Tape::record(int rows, int cols, std::vector<double> value,
                 std::initializer_list<Var> inputs, Backward backward) {
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(value);
  for (Var in : inputs) {
    check_owner(in);
    n.needs_grad = n.needs_grad || nodes_[in.id()].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::backward(Var root) {
  check_owner(root);
  require(root.size() == 1, "backward: root must be a scalar");
  const double one = 1.0;
  backward(root, std::span<const double>(&one, 1));
}

void Tape::backward(Var root, std::span<const double> seed) {
  check_owner(root);
  auto& r = nodes_[root.id()];
  require(seed.size() == r.value.size(), "backward: seed shape mismatch");
  for (auto& n : nodes_) n.adjoint.assign(n.value.size(), 0.0);
  std::copy(seed.begin(), seed.end(), r.adjoint.begin());
  backward_ran_ = true;
  for (int id = root.id(); id >= 0; --id) {
    auto& n = nodes_[id];
    if (!n.needs_grad || !n.backward) continue;
    n.backward(*this, id);
  }
}

std::span<const double> Tape::value(Var v) const {
  check_owner(v);
  return nodes_[v.id()].value;
}

std::span<const double> Tape::adjoint(Var v) const {
  check_owner(v);
  if (!backward_ran_) throw std::logic_error("adjoint read before backward");
  return nodes_[v.id()].adjoint;
}

std::span<double> Tape::adjoint_mut(int id) { return nodes_[id].adjoint; }

// ---- linear algebra -------------------------------------------------------

Var matvec(Var w, Var x) {
  const int rows = w.rows(), cols = w.cols();
  if (static_cast<std::size_t>(cols) != x.size()) {
    throw std::invalid_argument("matvec: matrix has " + std::to_string(cols) +
                                " columns but vector has " +
                                std::to_string(x.size()) + " entries");
  }
  auto wv = w.value();
  auto xv = x.value();
  std::vector<double> out(rows, 0.0);
  for (int i = 0; i < rows; ++i) {
    const double* row = wv.data() + static_cast<std::size_t>(i) * cols;
    double acc = 0.0;
    for (int j = 0; j < cols; ++j) acc += row[j] * xv[j];
    out[i] = acc;
  }
  return w.tape().record(
      rows, 1, std::move(out), {w, x}, [w, x, rows, cols](Tape& t, int self) {
        auto g = t.adjoint_mut(self);
        if (t.needs_grad(w.id())) {
          auto gw = t.adjoint_mut(w.id());
          auto xv = t.value(x);
          const double fault = t.backward_fault() ? 2.0 : 1.0;
          for (int i = 0; i < rows; ++i) {
            const double gi = g[i] * fault;
            if (gi == 0.0) continue;
            double* row = gw.data() + static_cast<std::size_t>(i) * cols;
            for (int j = 0; j < cols; ++j) row[j] += gi * xv[j];
          }
        }
        if (t.needs_grad(x.id())) {
          auto gx = t.adjoint_mut(x.id());
          auto wv = t.value(w);
          for (int i = 0; i < rows; ++i) {
            const double gi = g[i];
            if (gi == 0.0) continue;
            const double* row = wv.data() + static_cast<std::size_t>(i) * cols;
            for (int j = 0; j < cols; ++j) gx[j] += gi * row[j];
          }
        }
      });
}

Var matvec_t(Var w, Var x) {
  const int rows = w.rows(), cols = w.cols();
  if (static_cast<std::size_t>(rows) != x.size()) {
    throw std::invalid_argument("matvec_t: matrix has " + std::to_string(rows) +
                                " rows but vector has " +
                                std::to_string(x.size()) + " entries");
  }
  auto wv = w.value();
  auto xv = x.value();
  std::vector<double> out(cols, 0.0);
  for (int i = 0; i < rows; ++i) {
    const double xi = xv[i];
    if (xi == 0.0) continue;
    const double* row = wv.data() + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) out[j] += row[j] * xi;
  }
  return w.tape().record(
      cols, 1, std::move(out), {w, x}, [w, x, rows, cols](Tape& t, int self) {
        auto g = t.adjoint_mut(self);
        if (t.needs_grad(w.id())) {
          auto gw = t.adjoint_mut(w.id());
          auto xv = t.value(x);
          const double fault = t.backward_fault() ? 2.0 : 1.0;
          for (int i = 0; i < rows; ++i) {
            const double xi = xv[i] * fault;
            if (xi == 0.0) continue;
            double* row = gw.data() + static_cast<std::size_t>(i) * cols;
            for (int j = 0; j < cols; ++j) row[j] += xi * g[j];
          }
        }
        if (t.needs_grad(x.id())) {
          auto gx = t.adjoint_mut(x.id());
          auto wv = t.value(w);
          for (int i = 0; i < rows; ++i) {
            const double* row = wv.data() + static_cast<std::size_t>(i) * cols;
            double acc = 0.0;
            for (int j = 0; j < cols; ++j) acc += row[j] * g[j];
            gx[i] += acc;
          }
        }
      });
}

Var sparse_matvec(Var w, SparseView x) {
  const int rows = w.rows(), cols = w.cols();
  if (x.index.size() != x.value.size()) {
    throw std::invalid_argument("sparse_matvec: index/value length mismatch");
  }
  for (int j : x.index) {
    if (j < 0 || j >= cols) {
      throw std::invalid_argument("sparse_matvec: feature index " +
                                  std::to_string(j) + " outside [0, " +
                                  std::to_string(cols) + ")");
    }
  }
  std::vector<int> idx(x.index.begin(), x.index.end());
  std::vector<double> val(x.value.begin(), x.value.end());
  auto wv = w.value();
  std::vector<double> out(rows, 0.0);
  for (int i = 0; i < rows; ++i) {
    const double* row = wv.data() + static_cast<std::size_t>(i) * cols;
    double acc = 0.0;
    for (std::size_t k = 0; k < idx.size(); ++k) acc += row[idx[k]] * val[k];
    out[i] = acc;
  }
  return w.tape().record(
      rows, 1, std::move(out), {w},
      [w, idx = std::move(idx), val = std::move(val), rows, cols](Tape& t,
                                                                 int self) {
        auto g = t.adjoint_mut(self);
        auto gw = t.adjoint_mut(w.id());
        const double fault = t.backward_fault() ? 2.0 : 1.0;
        for (int i = 0; i < rows; ++i) {
          const double gi = g[i] * fault;
          if (gi == 0.0) continue;
          double* row = gw.data() + static_cast<std::size_t>(i) * cols;
          for (std::size_t k = 0; k < idx.size(); ++k) row[idx[k]] += gi * val[k];
        }
      });
}

// ---- elementwise ----------------------------------------------------------

Var add(Var a, Var b) {
  require_same_size(a, b, "add");
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape().record(a.rows(), a.cols(), std::move(out), {a, b},
                         [a, b](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           for (Var in : {a, b}) {
                             if (!t.needs_grad(in.id())) continue;
                             auto gi = t.adjoint_mut(in.id());
                             for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                           }
                         });
}

Var sub(Var a, Var b) {
  require_same_size(a, b, "sub");
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape().record(a.rows(), a.cols(), std::move(out), {a, b},
                         [a, b](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           if (t.needs_grad(a.id())) {
                             auto ga = t.adjoint_mut(a.id());
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (t.needs_grad(b.id())) {
                             auto gb = t.adjoint_mut(b.id());
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           }
                         });
}

Var mul(Var a, Var b) {
  require_same_size(a, b, "mul");
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape().record(a.rows(), a.cols(), std::move(out), {a, b},
                         [a, b](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           auto av = t.value(a), bv = t.value(b);
                           if (t.needs_grad(a.id())) {
                             auto ga = t.adjoint_mut(a.id());
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                           }
                           if (t.needs_grad(b.id())) {
                             auto gb = t.adjoint_mut(b.id());
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                           }
                         });
}

Var div(Var a, Var b) {
  require_same_size(a, b, "div");
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return a.tape().record(a.rows(), a.cols(), std::move(out), {a, b},
                         [a, b](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           auto bv = t.value(b);
                           auto yv = t.value(Var(&t, self));
                           if (t.needs_grad(a.id())) {
                             auto ga = t.adjoint_mut(a.id());
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
                           }
                           if (t.needs_grad(b.id())) {
                             auto gb = t.adjoint_mut(b.id());
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               gb[i] -= g[i] * yv[i] / bv[i];
                             }
                           }
                         });
}

Var add_scalar(Var v, Var s) {
  require_scalar(s, "add_scalar");
  const double sv = s.scalar();
  auto vv = v.value();
  std::vector<double> out(vv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vv[i] + sv;
  return v.tape().record(v.rows(), v.cols(), std::move(out), {v, s},
                         [v, s](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           if (t.needs_grad(v.id())) {
                             auto gv = t.adjoint_mut(v.id());
                             for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
                           }
                           if (t.needs_grad(s.id())) {
                             double acc = 0.0;
                             for (double gi : g) acc += gi;
                             t.adjoint_mut(s.id())[0] += acc;
                           }
                         });
}

Var sub_scalar(Var v, Var s) {
  require_scalar(s, "sub_scalar");
  const double sv = s.scalar();
  auto vv = v.value();
  std::vector<double> out(vv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vv[i] - sv;
  return v.tape().record(v.rows(), v.cols(), std::move(out), {v, s},
                         [v, s](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           if (t.needs_grad(v.id())) {
                             auto gv = t.adjoint_mut(v.id());
                             for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
                           }
                           if (t.needs_grad(s.id())) {
                             double acc = 0.0;
                             for (double gi : g) acc += gi;
                             t.adjoint_mut(s.id())[0] -= acc;
                           }
                         });
}

Var mul_scalar(Var v, Var s) {
  require_scalar(s, "mul_scalar");
  const double sv = s.scalar();
  auto vv = v.value();
  std::vector<double> out(vv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vv[i] * sv;
  return v.tape().record(v.rows(), v.cols(), std::move(out), {v, s},
                         [v, s](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           if (t.needs_grad(v.id())) {
                             const double sv = t.value(s)[0];
                             auto gv = t.adjoint_mut(v.id());
                             for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i] * sv;
                           }
                           if (t.needs_grad(s.id())) {
                             auto vv = t.value(v);
                             double acc = 0.0;
                             for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * vv[i];
                             t.adjoint_mut(s.id())[0] += acc;
                           }
                         });
}

Var scale(Var v, double c) {
  return unary_map(
      v, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var shift(Var v, double c) {
  return unary_map(
      v, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var mul_const(Var v, std::span<const double> c) {
  if (c.size() != v.size()) {
    throw std::invalid_argument("mul_const: length mismatch");
  }
  std::vector<double> cv(c.begin(), c.end());
  auto vv = v.value();
  std::vector<double> out(vv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vv[i] * cv[i];
  return v.tape().record(v.rows(), v.cols(), std::move(out), {v},
                         [v, cv = std::move(cv)](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           auto gv = t.adjoint_mut(v.id());
                           for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i] * cv[i];
                         });
}

Var relu(Var v) {
  return unary_map(
      v, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var max0(Var v) { return relu(v); }

Var sigmoid(Var v) {
  return unary_map(
      v,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var softsign(Var v) {
  return unary_map(
      v, [](double x) { return x / (1.0 + std::abs(x)); },
      [](double x, double) {
        const double d = 1.0 + std::abs(x);
        return 1.0 / (d * d);
      });
}

Var clip01(Var v) {
  return unary_map(
      v, [](double x) { return std::min(std::max(x, 0.0), 1.0); },
      [](double x, double) { return (x > 0.0 && x < 1.0) ? 1.0 : 0.0; });
}

Var min1(Var v) {
  return unary_map(
      v, [](double x) { return std::min(x, 1.0); },
      [](double x, double) { return x < 1.0 ? 1.0 : 0.0; });
}

Var step(Var v) {
  auto vv = v.value();
  std::vector<double> out(vv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vv[i] > 0.0 ? 1.0 : 0.0;
  return v.tape().constant(v.rows(), v.cols(), std::move(out));
}

Var log(Var v) {
  return unary_map(
      v, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Var softplus(Var v) {
  return unary_map(
      v,
      [](double x) {
        return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
      },
      [](double x, double) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

// ---- reductions and structure ---------------------------------------------

Var sum(Var v) {
  auto vv = v.value();
  const double s = std::accumulate(vv.begin(), vv.end(), 0.0);
  return v.tape().record(1, 1, {s}, {v}, [v](Tape& t, int self) {
    const double g = t.adjoint_mut(self)[0];
    auto gv = t.adjoint_mut(v.id());
    for (double& x : gv) x += g;
  });
}

Var dot(Var a, Var b) {
  require_same_size(a, b, "dot");
  auto av = a.value(), bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return a.tape().record(1, 1, {s}, {a, b}, [a, b](Tape& t, int self) {
    const double g = t.adjoint_mut(self)[0];
    auto av = t.value(a), bv = t.value(b);
    if (t.needs_grad(a.id())) {
      auto ga = t.adjoint_mut(a.id());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * bv[i];
    }
    if (t.needs_grad(b.id())) {
      auto gb = t.adjoint_mut(b.id());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * av[i];
    }
  });
}

Var softmax(Var v) {
  auto vv = v.value();
  require(!vv.empty(), "softmax: empty input");
  const double m = *std::max_element(vv.begin(), vv.end());
  std::vector<double> out(vv.size());
  double z = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(vv[i] - m);
    z += out[i];
  }
  for (double& x : out) x /= z;
  return v.tape().record(v.rows(), v.cols(), std::move(out), {v},
                         [v](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           auto y = t.value(Var(&t, self));
                           double gy = 0.0;
                           for (std::size_t i = 0; i < g.size(); ++i) gy += g[i] * y[i];
                           auto gv = t.adjoint_mut(v.id());
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             gv[i] += y[i] * (g[i] - gy);
                           }
                         });
}

Var log_softmax(Var v) {
  auto vv = v.value();
  require(!vv.empty(), "log_softmax: empty input");
  const double m = *std::max_element(vv.begin(), vv.end());
  double z = 0.0;
  for (double x : vv) z += std::exp(x - m);
  const double lse = m + std::log(z);
  std::vector<double> out(vv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vv[i] - lse;
  return v.tape().record(v.rows(), v.cols(), std::move(out), {v},
                         [v](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           auto y = t.value(Var(&t, self));
                           double gs = 0.0;
                           for (double gi : g) gs += gi;
                           auto gv = t.adjoint_mut(v.id());
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             gv[i] += g[i] - std::exp(y[i]) * gs;
                           }
                         });
}

Var cumsum(Var v) {
  auto vv = v.value();
  require(!vv.empty(), "cumsum: empty input");
  std::vector<double> out(vv.size());
  std::partial_sum(vv.begin(), vv.end(), out.begin());
  return v.tape().record(v.rows(), v.cols(), std::move(out), {v},
                         [v](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           auto gv = t.adjoint_mut(v.id());
                           double acc = 0.0;
                           for (std::size_t i = g.size(); i-- > 0;) {
                             acc += g[i];
                             gv[i] += acc;
                           }
                         });
}

Var concat(Var a, Var b) {
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.begin(), av.end());
  out.insert(out.end(), bv.begin(), bv.end());
  const int n = static_cast<int>(out.size());
  const std::size_t na = av.size();
  return a.tape().record(n, 1, std::move(out), {a, b},
                         [a, b, na](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           if (t.needs_grad(a.id())) {
                             auto ga = t.adjoint_mut(a.id());
                             for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
                           }
                           if (t.needs_grad(b.id())) {
                             auto gb = t.adjoint_mut(b.id());
                             for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
                           }
                         });
}

Var slice(Var v, int begin, int length) {
  if (begin < 0 || length < 0 ||
      static_cast<std::size_t>(begin + length) > v.size()) {
    throw std::invalid_argument("slice: range out of bounds");
  }
  auto vv = v.value();
  std::vector<double> out(vv.begin() + begin, vv.begin() + begin + length);
  return v.tape().record(length, 1, std::move(out), {v},
                         [v, begin](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           auto gv = t.adjoint_mut(v.id());
                           for (std::size_t i = 0; i < g.size(); ++i) gv[begin + i] += g[i];
                         });
}

Var pick(Var v, int index) { return slice(v, index, 1); }

Var broadcast(Var s, int n) {
  require_scalar(s, "broadcast");
  std::vector<double> out(n, s.scalar());
  return s.tape().record(n, 1, std::move(out), {s}, [s](Tape& t, int self) {
    double acc = 0.0;
    for (double g : t.adjoint_mut(self)) acc += g;
    t.adjoint_mut(s.id())[0] += acc;
  });
}

Var gather(Var v, std::vector<int> index) {
  auto vv = v.value();
  std::vector<double> out(index.size());
  for (std::size_t k = 0; k < index.size(); ++k) {
    const int i = index[k];
    if (i < 0 || static_cast<std::size_t>(i) >= vv.size()) {
      throw std::invalid_argument("gather: index out of range");
    }
    out[k] = vv[i];
  }
  const int n = static_cast<int>(out.size());
  return v.tape().record(n, 1, std::move(out), {v},
                         [v, index = std::move(index)](Tape& t, int self) {
                           auto g = t.adjoint_mut(self);
                           auto gv = t.adjoint_mut(v.id());
                           for (std::size_t k = 0; k < index.size(); ++k) gv[index[k]] += g[k];
                         });
}

Var detach(Var v) {
  auto vv = v.value();
  return v.tape().constant(v.rows(), v.cols(),
                           std::vector<double>(vv.begin(), vv.end()));
}

Sorted sort_desc(Var v) {
  auto vv = v.value();
  std::vector<int> perm(vv.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&vv](int a, int b) { return vv[a] > vv[b]; });
  Var sorted = gather(v, perm);
  return {sorted, std::move(perm)};
}

}  // namespace cardnet::dg
