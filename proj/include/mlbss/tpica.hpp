#pragma once

#include <vector>

#include "mlbss/cpd.hpp"
#include "mlbss/tensor.hpp"

namespace mlbss {

// Rank-one factorization of each column of a (time*subjects) x R mixing
// matrix: column r reshaped to time x subjects and split by its dominant
// singular pair. residuals[r] = 1 - sigma_1^2 / sum_i sigma_i^2.
struct KrFactorization {
  Matrix B;  // time x R
  Matrix C;  // subjects x R
  Vector residuals;
  std::vector<bool> degenerate;  // true where the column was (near) zero
};
KrFactorization kr_factorize(const Matrix& m, std::size_t time_len, std::size_t subj_len);

// First pipeline stage, exposed for verification: compress a row-centered
// matrix to its r leading left singular directions, scaled so the columns of
// the result have unit second moment over rows and are pairwise orthogonal.
// Throws when the matrix rank is below r.
Matrix whiten_to_components(const Matrix& row_centered, std::size_t r);

// Two-step tensor probabilistic ICA decomposition of a 3-way voxels x time x
// subjects tensor: (1) row-center the voxels x (time*subjects) unfolding,
// whiten to R components by truncated SVD, and run fixed-point ICA with the
// tanh contrast and symmetric orthogonalization (column-angle tolerance 1e-6,
// up to 1000 iterations, opts.restarts independent starts scored by a
// negentropy proxy); (2) rank-one-factorize the least-squares mixing matrix
// into per-component time courses and subject loadings. Spatial map signs
// follow positive skewness.
struct TpicaModel {
  Matrix A;  // voxels x R spatial maps, unit variance columns
  Matrix M;  // (time*subjects) x R mixing matrix
  Matrix B;  // time x R
  Matrix C;  // subjects x R
  Matrix unmixing;  // R x R, rows orthonormal in whitened coordinates
  Vector kr_residuals;
  bool converged = false;
};
TpicaModel tpica(const Tensor& t, std::size_t rank, const SolverOptions& opts = {});

}  // namespace mlbss
