#pragma once

#include <vector>

#include "mlbss/cpd.hpp"
#include "mlbss/tensor.hpp"

namespace mlbss {

// One block term (X_r Y_r^T) outer b_r (outer c_r for 4-way models).
struct BtdTerm {
  Matrix X;  // I1 x L
  Matrix Y;  // I2 x L
  Vector b;  // I3
  Vector c;  // I4; empty for 3-way terms
  std::size_t L = 0;
  // Term collapsed below 1e-12 * |T| during fitting and stayed there after
  // one re-seed; its matrices are zeroed and it should be ignored downstream.
  bool empty = false;
};

struct BtdModel {
  std::vector<BtdTerm> terms;

  std::size_t rank() const { return terms.size(); }
  bool four_way() const { return !terms.empty() && terms.front().c.size() > 0; }
};

// Dense reconstruction: sum_r (X_r Y_r^T) outer b_r (outer c_r).
Tensor btd_to_tensor(const BtdModel& m);

// Structural uniqueness checks on a fitted model: the stacked [X_1 ... X_R]
// and [Y_1 ... Y_R] must have full column rank, and no two columns of B, C,
// or of their Khatri-Rao product may be collinear (and none may vanish).
struct UniquenessReport {
  std::size_t x_rank = 0, x_cols = 0;
  std::size_t y_rank = 0, y_cols = 0;
  bool x_full_rank = false, y_full_rank = false;
  double max_b_cos = 0.0, max_c_cos = 0.0, max_g_cos = 0.0;
  bool b_ok = false, c_ok = false, g_ok = false;
  bool all_ok = false;
};
UniquenessReport uniqueness_preconditions(const BtdModel& m);

struct BtdResult {
  BtdModel model;
  FitHistory history;  // for the nested 4-way path: iterates of the 3-way solve
  UniquenessReport uniqueness;
};

// Rank-(L_r, L_r, 1) block-term decomposition of a 3-way tensor by
// alternating least squares over {X_r}, {Y_r}, B. ranks[r] = L_r.
// The first restart starts from the data's dominant third-mode subspace
// (leading eigenvectors of the mode-3 Gram, slabs seeded by thin SVDs) when
// the problem is small enough; remaining restarts use random starts.
// With opts.gauss_newton_refine, the best restart gets a damped Gauss-Newton
// polish (skipped with a warning when the parameter count is too large).
BtdResult btd_llr1(const Tensor& t, const std::vector<std::size_t>& ranks,
                   const SolverOptions& opts = {});

// Rank-(L_r, L_r, 1, 1) decomposition of a 4-way tensor. Solves the 3-way
// problem on the I1 x I2 x (I3*I4) reshaping, then splits each third-mode
// vector g_r into b_r (x) c_r via the dominant singular pair of its I3 x I4
// reshaping; signs are fixed so b_r's largest-magnitude entry is positive.
BtdResult btd_llr11(const Tensor& t, const std::vector<std::size_t>& ranks,
                    const SolverOptions& opts = {});

// Direct 4-way alternating path over {X_r}, {Y_r}, B, C; same model class,
// kept for cross-validation against the nested path.
BtdResult btd_llr11_direct(const Tensor& t, const std::vector<std::size_t>& ranks,
                           const SolverOptions& opts = {});

// Mixed-rank variant: n_low terms of rank L plus n_high terms of rank L_high
// (> L), letting a few terms absorb high-rank structure. 4-way input.
BtdResult adapted_btd(const Tensor& t, std::size_t n_low, std::size_t L, std::size_t n_high,
                      std::size_t L_high, const SolverOptions& opts = {});

}  // namespace mlbss
