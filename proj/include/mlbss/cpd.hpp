#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mlbss/tensor.hpp"

namespace mlbss {

// Shared alternating-solver controls. `seed` feeds a per-restart stream, so
// results are reproducible no matter how restarts are scheduled.
struct SolverOptions {
  int max_iters = 500;
  double tol = 1e-8;  // stop when the fit improves by less than this
  int restarts = 5;
  std::uint64_t seed = 0;
  // Optional Gauss-Newton polish after the best restart (block-term solvers
  // only). Off by default; intended for small/medium problems.
  bool gauss_newton_refine = false;
  int gn_max_iters = 15;
};

// Canonical polyadic model: unit-norm factor columns, scales in lambda.
struct KruskalModel {
  std::vector<Matrix> factors;
  Vector lambda;

  std::size_t order() const { return factors.size(); }
  std::size_t rank() const { return factors.empty() ? 0 : static_cast<std::size_t>(lambda.size()); }
};

Tensor kruskal_to_tensor(const KruskalModel& m);

// One solver run's trace: per-sweep fit = 1 - |T - That|_F / |T|_F.
struct FitHistory {
  std::vector<double> fits;
  int restart_index = -1;  // which restart produced this model
  bool converged = false;
  std::vector<std::string> warnings;  // e.g. ill-conditioned normal equations
};

struct CpdResult {
  KruskalModel model;
  FitHistory history;
};

// Alternating least squares with Gaussian random restarts. Best restart by
// final fit wins; ties go to the lowest restart index. Throws ArgumentError
// for infeasible rank/shape, NumericalError if every restart breaks down.
CpdResult cpd_als(const Tensor& t, std::size_t rank, const SolverOptions& opts = {});

// Exhaustive k-ranks of the three factor matrices and the sufficient
// uniqueness inequality kA + kB + kC >= 2R + 2.
struct KruskalConditionReport {
  std::vector<std::size_t> k_ranks;
  std::size_t rank = 0;
  bool holds = false;
};
KruskalConditionReport kruskal_condition(const KruskalModel& m);

// Core consistency of a fitted 3-way model: 100 * (1 - sum((g - delta)^2) / R)
// where g is the least-squares Tucker core of t under the model's factors.
// A single-component model always scores 100 (its 1x1x1 core absorbs scale).
// Sets *used_pinv when rank-deficient factors forced a pseudo-inverse.
double corcondia(const Tensor& t, const KruskalModel& m, bool* used_pinv = nullptr);

// Fits ranks 1..r_max, scores each with corcondia, and picks the corner of
// the score-vs-rank curve: the rank furthest above the line joining the
// curve's endpoints (scores clamped to [0,100] for the geometry). A flat
// curve yields 1. Scores are reported through *scores_out when given.
std::size_t estimate_rank(const Tensor& t, std::size_t r_max, const SolverOptions& opts = {},
                          std::vector<double>* scores_out = nullptr);

}  // namespace mlbss
