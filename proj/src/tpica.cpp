#include "mlbss/tpica.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/Dense>

#include "mlbss/errors.hpp"
#include "mlbss/random.hpp"
#include "solve_utils.hpp"

namespace mlbss {

namespace {

// Fixed-point ICA constants: max column-angle change below kIcaTol ends the
// iteration; kIcaMaxIters caps a single run.
constexpr double kIcaTol = 1e-6;
constexpr int kIcaMaxIters = 1000;
// E[log cosh(z)] for standard normal z; reference point of the negentropy
// proxy used to score restarts.
constexpr double kGaussLogCosh = 0.3745672966142067;

// W (W^T W)^{-1/2}: closest matrix with orthonormal columns.
Matrix symmetric_orth(const Matrix& w) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(w.transpose() * w);
  const Vector& lam = eig.eigenvalues();
  Vector inv_sqrt(lam.size());
  for (Eigen::Index i = 0; i < lam.size(); ++i)
    inv_sqrt(i) = lam(i) > 0.0 ? 1.0 / std::sqrt(lam(i)) : 0.0;
  return w * eig.eigenvectors() * inv_sqrt.asDiagonal() * eig.eigenvectors().transpose();
}

struct IcaRun {
  Matrix w;
  bool converged = false;
  double score = -1.0;
};

// Symmetric fixed-point iteration with the tanh contrast on whitened rows.
IcaRun run_fastica(const Matrix& z, std::mt19937_64& rng) {
  const auto n = static_cast<double>(z.rows());
  const Eigen::Index r = z.cols();
  IcaRun run;
  run.w = symmetric_orth(detail::gaussian_matrix(rng, r, r));
  for (int it = 0; it < kIcaMaxIters; ++it) {
    const Matrix s = z * run.w;           // n x r component estimates
    const Matrix g = s.array().tanh();    // contrast derivative
    Matrix w_new(r, r);
    for (Eigen::Index j = 0; j < r; ++j) {
      const double gprime_mean = 1.0 - g.col(j).squaredNorm() / n;
      w_new.col(j) = (z.transpose() * g.col(j)) / n - gprime_mean * run.w.col(j);
    }
    w_new = symmetric_orth(w_new);
    double delta = 0.0;
    for (Eigen::Index j = 0; j < r; ++j)
      delta = std::max(delta, 1.0 - std::abs(w_new.col(j).dot(run.w.col(j))));
    run.w = w_new;
    if (delta < kIcaTol) {
      run.converged = true;
      break;
    }
  }
  const Matrix s = z * run.w;
  run.score = 0.0;
  for (Eigen::Index j = 0; j < r; ++j)
    run.score += std::abs(s.col(j).array().cosh().log().mean() - kGaussLogCosh);
  return run;
}

}  // namespace

Matrix whiten_to_components(const Matrix& row_centered, std::size_t r) {
  if (r < 1) throw ArgumentError("whiten_to_components: rank must be positive");
  if (static_cast<Eigen::Index>(r) > row_centered.cols() ||
      static_cast<Eigen::Index>(r) > row_centered.rows())
    throw ArgumentError("whiten_to_components: rank exceeds matrix dimensions");
  // Eigen-decomposing the small Gram matrix is the truncated SVD of the tall
  // matrix itself: eigenvalues are squared singular values.
  Eigen::SelfAdjointEigenSolver<Matrix> eig(row_centered.transpose() * row_centered);
  const Vector& lam = eig.eigenvalues();  // ascending
  const Eigen::Index total = lam.size();
  const double lam_max = lam(total - 1);
  const auto rc = static_cast<Eigen::Index>(r);
  // Eigenvalues are squared singular values; directions below sigma_1 * 1e-6
  // are numerically unusable for whitening (the 1/sigma scaling explodes).
  if (lam_max <= 0.0 || lam(total - rc) <= 1e-12 * lam_max)
    throw ArgumentError("whiten_to_components: matrix rank is below the requested " +
                        std::to_string(r) + " components");
  Matrix z(row_centered.rows(), rc);
  const double scale = std::sqrt(static_cast<double>(row_centered.rows()));
  for (Eigen::Index j = 0; j < rc; ++j) {
    const Eigen::Index src = total - 1 - j;  // descending order
    z.col(j) = row_centered * eig.eigenvectors().col(src) * (scale / std::sqrt(lam(src)));
  }
  return z;
}

KrFactorization kr_factorize(const Matrix& m, std::size_t time_len, std::size_t subj_len) {
  if (time_len < 1 || subj_len < 1 ||
      m.rows() != static_cast<Eigen::Index>(time_len * subj_len))
    throw ArgumentError("kr_factorize: rows must equal time_len * subj_len");
  const auto tl = static_cast<Eigen::Index>(time_len);
  const auto sl = static_cast<Eigen::Index>(subj_len);
  KrFactorization out;
  out.B = Matrix::Zero(tl, m.cols());
  out.C = Matrix::Zero(sl, m.cols());
  out.residuals = Vector::Zero(m.cols());
  out.degenerate.assign(static_cast<std::size_t>(m.cols()), false);
  for (Eigen::Index r = 0; r < m.cols(); ++r) {
    const double norm = m.col(r).norm();
    if (norm == 0.0) {
      out.degenerate[static_cast<std::size_t>(r)] = true;
      out.residuals(r) = 1.0;
      continue;
    }
    Eigen::Map<const Matrix> resh(m.col(r).data(), tl, sl);
    Eigen::JacobiSVD<Matrix> svd(resh, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& s = svd.singularValues();
    const double root = std::sqrt(s(0));
    Vector b = svd.matrixU().col(0) * root;
    Vector c = svd.matrixV().col(0) * root;
    Eigen::Index idx = 0;
    b.cwiseAbs().maxCoeff(&idx);
    if (b(idx) < 0.0) {  // flipping the pair keeps the product
      b = -b;
      c = -c;
    }
    out.B.col(r) = b;
    out.C.col(r) = c;
    out.residuals(r) = 1.0 - (s(0) * s(0)) / s.squaredNorm();
  }
  return out;
}

TpicaModel tpica(const Tensor& t, std::size_t rank, const SolverOptions& opts) {
  if (t.order() != 3)
    throw ArgumentError("tpica: expected a voxels x time x subjects tensor, got order " +
                        std::to_string(t.order()));
  const auto& shape = t.shape();
  if (rank < 1 || rank > std::min(shape[1] * shape[2], shape[0]))
    throw ArgumentError("tpica: rank outside [1, min(time*subjects, voxels)]");
  if (opts.restarts < 1) throw ArgumentError("tpica: invalid solver options");
  if (frobenius_norm(t) == 0.0) throw ArgumentError("tpica: input tensor is identically zero");

  Matrix xc = unfold(t, 0);  // voxels x (time*subjects)
  xc.colwise() -= xc.rowwise().mean().eval();
  const Matrix z = whiten_to_components(xc, rank);

  IcaRun best;
  int best_restart = -1;
  for (int restart = 0; restart < opts.restarts; ++restart) {
    std::mt19937_64 rng = seeded_rng(opts.seed, static_cast<std::uint64_t>(restart));
    IcaRun run = run_fastica(z, rng);
    // Converged runs beat non-converged ones; then the higher proxy wins.
    const bool better =
        best_restart < 0 || (run.converged && !best.converged) ||
        (run.converged == best.converged && run.score > best.score);
    if (better) {
      best = run;
      best_restart = restart;
    }
  }

  TpicaModel model;
  model.converged = best.converged;
  model.unmixing = best.w.transpose();
  Matrix s = z * best.w;  // voxels x R

  const auto n = static_cast<double>(s.rows());
  model.A = Matrix(s.rows(), s.cols());
  for (Eigen::Index j = 0; j < s.cols(); ++j) {
    const double mean = s.col(j).mean();
    Eigen::ArrayXd centered = s.col(j).array() - mean;
    const double sd = std::sqrt(centered.square().sum() / n);
    const double skew = (centered * centered * centered).sum() / (n * sd * sd * sd);
    model.A.col(j) = s.col(j) * ((skew < 0.0 ? -1.0 : 1.0) / sd);
  }

  bool pinv_used = false;
  model.M = detail::solve_gram(model.A.transpose() * model.A, xc.transpose() * model.A,
                               &pinv_used);
  KrFactorization kr = kr_factorize(model.M, shape[1], shape[2]);
  model.B = std::move(kr.B);
  model.C = std::move(kr.C);
  model.kr_residuals = std::move(kr.residuals);
  return model;
}

}  // namespace mlbss
