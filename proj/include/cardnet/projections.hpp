#pragma once

// Projection operators onto the box, the positive simplex and their
// intersection, the capped simplex
//
//     Z = { y : 0 <= y_i <= 1, sum_i y_i = z }.
//
// Every operator comes in an exact form working on plain buffers (reference
// implementations) and, where it is used inside unrolled inference, in a
// soft form recorded on a dg::Tape.

#include <span>
#include <vector>

#include "cardnet/diffgraph.hpp"

namespace cardnet::proj {

struct CappedSimplexSpec {
  int labels = 0;
  double z = 0.0;

  /// Throws std::invalid_argument unless 0 <= z <= labels.
  void validate() const;
};

struct ProjectionResult {
  std::vector<double> y;
  double residual_sum = 0.0;  // |sum(y) - z|
  double residual_box = 0.0;  // max(0, max_i(y_i - 1), max_i(-y_i))
  int iterations = 0;
};

/// Feasibility residuals of y with respect to the capped simplex of total z.
ProjectionResult diagnose(std::vector<double> y, double z, int iterations);

enum class SimplexMode { soft, exact };

// ---- box ------------------------------------------------------------------

/// min(y, 1): projection onto { y : y_i <= 1 }.
std::vector<double> project_box_upper(std::span<const double> y);
dg::Var project_box_upper(dg::Var y);

// ---- positive simplex { u >= 0, sum u = z } --------------------------------

/// Sort-based pivot projection. Throws if z <= 0.
std::vector<double> project_simplex_exact(std::span<const double> v, double z);

/// Smooth surrogate of the sort-based projection: the hard search for the
/// pivot index is replaced by a softmax over softsign scores. `sharpness`
/// scales the softsign argument and the softmax logits; 1 gives the plain
/// surrogate, larger values approach the exact projection.
dg::Var project_simplex_soft(dg::Var v, dg::Var z, double sharpness);
dg::Var project_simplex_soft(dg::Var v, double z, double sharpness);

// ---- capped simplex -------------------------------------------------------

/// Dykstra's alternating projections between { y <= 1 } and the positive
/// simplex, run for `rounds` rounds starting from p = q = 0. The exact mode
/// uses project_simplex_exact; the soft mode evaluates the soft simplex
/// projection on a private tape.
ProjectionResult project_capped_dykstra(std::span<const double> v,
                                        const CappedSimplexSpec& spec,
                                        int rounds, double sharpness = 10.0,
                                        SimplexMode mode = SimplexMode::exact);

struct DykstraOptions {
  int rounds = 2;
  double sharpness = 10.0;
  /// Treat the Dykstra residuals p, q as constants in the backward pass.
  bool detach_residuals = false;
};

/// Soft Dykstra projection recorded on the tape of `v`. A non-positive z
/// yields the zero vector.
dg::Var project_capped_dykstra(dg::Var v, dg::Var z,
                               const DykstraOptions& options);

struct CappedSolution {
  std::vector<double> y;
  double lambda = 0.0;  // y = clamp(v - lambda, 0, 1)
};

/// Exact projection onto the capped simplex via a breakpoint scan of the
/// piecewise-linear g(lambda) = sum_i clamp(v_i - lambda, 0, 1).
CappedSolution solve_capped(std::span<const double> v,
                            const CappedSimplexSpec& spec);
std::vector<double> project_capped_exact(std::span<const double> v,
                                         const CappedSimplexSpec& spec);

/// Differentiable bisection on the threshold lambda over [min(v) - 1, max(v)]:
/// the bracket is halved `iterations` times by comparing the soft sum z_j
/// (from soft one-hot encodings of the saturation boundaries) with z. The
/// tape records a Newton step at the final midpoint, so gradients are the
/// implicit derivative of the root. y = clamp(v - lambda, 0, 1).
dg::Var project_capped_fast_soft(dg::Var v, dg::Var z, int iterations,
                                 double sharpness);
dg::Var project_capped_fast_soft(dg::Var v, const CappedSimplexSpec& spec,
                                 int iterations, double sharpness);

// ---- non-binary extension -------------------------------------------------

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;  // row-major

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}
  double& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
  double operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }
};

/// Dykstra between "every row on the unit simplex" and "column j on the
/// positive simplex of total z_j". Requires z_j >= 0 and sum_j z_j = rows.
Matrix project_matrix_rows_cols(const Matrix& y, std::span<const double> z,
                                int rounds);

}  // namespace cardnet::proj
