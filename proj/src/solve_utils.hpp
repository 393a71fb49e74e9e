#pragma once

// Internal helpers shared by the alternating solvers. Not installed API.

#include <random>
#include <string>

#include <Eigen/Dense>

#include "mlbss/tensor.hpp"

namespace mlbss::detail {

// Relative eigenvalue cutoff below which a Gram matrix counts as singular.
constexpr double kGramRcond = 1e-12;

// Solves X * V = M for X with V symmetric PSD (Gram-type normal equations).
// Falls back to the eigenvalue pseudo-inverse when V is rank deficient and
// reports that through *used_pinv. Never throws on singular input.
inline Matrix solve_gram(const Matrix& v, const Matrix& m, bool* used_pinv = nullptr) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(v);
  const Vector& w = eig.eigenvalues();
  const double wmax = w.size() ? w.cwiseAbs().maxCoeff() : 0.0;
  const double cut = wmax * kGramRcond;
  bool deficient = (wmax == 0.0);
  Vector winv = Vector::Zero(w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (w(i) > cut)
      winv(i) = 1.0 / w(i);
    else
      deficient = true;
  }
  if (used_pinv) *used_pinv = *used_pinv || deficient;
  // pinv(V) = Q winv Q^T
  return m * eig.eigenvectors() * winv.asDiagonal() * eig.eigenvectors().transpose();
}

// Moore-Penrose pseudo-inverse via SVD; flags rank deficiency.
inline Matrix pinv(const Matrix& m, bool* deficient = nullptr, double rcond = 1e-12) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  const double cut = (s.size() ? s(0) : 0.0) * rcond;
  Vector sinv = Vector::Zero(s.size());
  bool any_dropped = (s.size() == 0 || s(0) == 0.0);
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > cut)
      sinv(i) = 1.0 / s(i);
    else
      any_dropped = true;
  }
  if (deficient) *deficient = *deficient || any_dropped;
  return svd.matrixV() * sinv.asDiagonal() * svd.matrixU().transpose();
}

inline Matrix gaussian_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> g;
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = g(rng);
  return m;
}

// Count of singular values above rel_tol * sigma_max.
inline std::size_t svd_rank(const Matrix& m, double rel_tol = 1e-10) {
  if (m.size() == 0) return 0;
  Eigen::JacobiSVD<Matrix> svd(m);
  const Vector& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  std::size_t r = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > rel_tol * s(0)) ++r;
  return r;
}

}  // namespace mlbss::detail
