#pragma once

// Minimal reverse-mode automatic differentiation over dense real vectors and
// row-major matrices. A Tape records operations in topological order; each
// recorded node owns its value buffer, its adjoint buffer (filled by
// backward) and a closure that pushes its adjoint onto its inputs.
//
// A Tape is single-writer. Independent tapes may live on different threads.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace cardnet::dg {

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// owning Tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }

  std::span<const double> value() const;
  /// Value of a single-element node.
  double scalar() const;
  std::size_t size() const;
  int rows() const;
  int cols() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Non-owning view of a sparse input vector (feature index, value pairs).
struct SparseView {
  std::span<const int> index;
  std::span<const double> value;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaves that never receive gradients.
  Var constant(std::vector<double> value);
  Var constant(int rows, int cols, std::vector<double> value);
  Var scalar(double value) { return constant(std::vector<double>{value}); }

  /// Leaves whose adjoints are read back after backward().
  Var variable(std::vector<double> value);
  Var variable(int rows, int cols, std::vector<double> value);

  /// Records an interior node. `inputs` decides whether the node takes part
  /// in the backward sweep; `backward` may be empty for non-differentiable
  /// nodes.
  Var record(int rows, int cols, std::vector<double> value,
             std::initializer_list<Var> inputs, Backward backward);

  /// Seeds the scalar root with 1 and sweeps adjoints back to every leaf.
  void backward(Var root);
  /// Same with an explicit seed of the root's shape.
  void backward(Var root, std::span<const double> seed);

  std::span<const double> value(Var v) const;
  std::span<const double> adjoint(Var v) const;
  std::span<double> adjoint_mut(int id);
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  int rows(int id) const { return nodes_[id].rows; }
  int cols(int id) const { return nodes_[id].cols; }
  std::size_t size() const { return nodes_.size(); }

  /// Test hook: when set, matrix-vector backward passes write a doubled
  /// adjoint into the matrix operand.
  void set_backward_fault(bool on) { backward_fault_ = on; }
  bool backward_fault() const { return backward_fault_; }

 private:
  struct Node {
    int rows = 0;
    int cols = 1;
    std::vector<double> value;
    std::vector<double> adjoint;
    Backward backward;
    bool needs_grad = false;
  };

  Var push(Node node);
  void check_owner(Var v) const;

  std::vector<Node> nodes_;
  bool backward_ran_ = false;
  bool backward_fault_ = false;
};

// ---- linear algebra -------------------------------------------------------

/// W·x with W of shape rows×cols and x of length cols.
Var matvec(Var w, Var x);
/// Wᵀ·x with W of shape rows×cols and x of length rows.
Var matvec_t(Var w, Var x);
/// W·x for a constant sparse x; adjoints flow into W only.
Var sparse_matvec(Var w, SparseView x);

// ---- elementwise ----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// Elementwise a / b.
Var div(Var a, Var b);

/// v + s·1 where s holds a single element.
Var add_scalar(Var v, Var s);
Var sub_scalar(Var v, Var s);
Var mul_scalar(Var v, Var s);

Var scale(Var v, double c);
Var shift(Var v, double c);
/// Elementwise product with a constant vector.
Var mul_const(Var v, std::span<const double> c);

Var relu(Var v);
Var sigmoid(Var v);
/// x / (1 + |x|)
Var softsign(Var v);
/// min(max(x, 0), 1)
Var clip01(Var v);
/// max(x, 0)
Var max0(Var v);
/// min(x, 1)
Var min1(Var v);
/// Heaviside indicator [x > 0]; carries no gradient.
Var step(Var v);
Var log(Var v);
Var softplus(Var v);

// ---- reductions and structure ---------------------------------------------

Var sum(Var v);
Var dot(Var a, Var b);
Var softmax(Var v);
Var log_softmax(Var v);
Var cumsum(Var v);
Var concat(Var a, Var b);
Var slice(Var v, int begin, int length);
Var pick(Var v, int index);
/// Repeats a single-element node n times.
Var broadcast(Var s, int n);
/// out[k] = v[index[k]]; backward scatters.
Var gather(Var v, std::vector<int> index);
/// Constant copy of v (gradient stops here).
Var detach(Var v);

struct Sorted {
  Var values;
  std::vector<int> perm;  // values[k] = v[perm[k]]
};

/// Stable descending sort. Backward routes adjoints through the inverse
/// permutation; ties keep the lower original index first.
Sorted sort_desc(Var v);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator+(Var a, double c) { return shift(a, c); }
inline Var operator-(Var a, double c) { return shift(a, -c); }
inline Var operator-(Var a) { return scale(a, -1.0); }

}  // namespace cardnet::dg
