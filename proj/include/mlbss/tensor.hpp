#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mlbss/errors.hpp"

namespace mlbss {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Dense real N-way array, 1 <= N <= 5, 64-bit elements.
///
/// Linear layout: the first index runs fastest, i.e. element (i0,...,i_{N-1})
/// sits at flat offset i0 + I0*(i1 + I1*(i2 + ...)). Mode-k unfolding maps
/// (i0,...,i_{N-1}) to row i_k and column j = sum_{m != k} i_m * prod_{l < m,
/// l != k} I_l: remaining modes enumerate columns with lower modes fastest.
/// Under this layout the mode-0 unfolding of a volume concatenates its
/// frontal slices left to right, and merging the two trailing modes of a
/// 4-way array is a pure reshape.
class Tensor {
 public:
  Tensor() = default;

  // Zero-filled tensor of the given shape.
  explicit Tensor(std::vector<std::size_t> shape);

  static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data);

  std::size_t order() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t dim(std::size_t mode) const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<const double> span() const { return {data_.data(), data_.size()}; }
  std::span<double> span() { return {data_.data(), data_.size()}; }

  double at(std::span<const std::size_t> index) const { return data_[offset_checked(index)]; }
  double& at(std::span<const std::size_t> index) { return data_[offset_checked(index)]; }

  template <class... Ix>
  double operator()(Ix... ix) const {
    return data_[offset_of(ix...)];
  }
  template <class... Ix>
  double& operator()(Ix... ix) {
    return data_[offset_of(ix...)];
  }

  // Same data, new shape (sizes must agree). Merging trailing modes this way
  // is exactly the nesting reshape used by the 4-way block-term solver.
  Tensor reshaped(std::vector<std::size_t> shape) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  template <class... Ix>
  std::size_t offset_of(Ix... ix) const {
    const std::size_t idx[] = {static_cast<std::size_t>(ix)...};
    std::size_t off = 0;
    for (std::size_t k = sizeof...(ix); k-- > 0;) off = off * shape_[k] + idx[k];
    return off;
  }
  std::size_t offset_checked(std::span<const std::size_t> index) const;

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// --- multilinear primitives -------------------------------------------------
// All of these delegate to the kernels layer (OpenMP-parallel with serial
// reference twins); see kernels.hpp.

// Mode-k unfolding, 0 <= mode < order(t). dim(mode) x (size/dim(mode)).
Matrix unfold(const Tensor& t, std::size_t mode);

// Inverse of unfold for the given shape; exact round trip.
Tensor fold(const Matrix& m, std::size_t mode, const std::vector<std::size_t>& shape);

// Column-wise Kronecker product: column r of the result is kron(a.col(r), b.col(r)),
// with b's index running fastest. Requires a.cols() == b.cols().
Matrix khatri_rao(const Matrix& a, const Matrix& b);

// Kronecker product; the second factor's indices run fastest.
Matrix kron(const Matrix& a, const Matrix& b);

// sqrt(sum of squares); deterministic across thread counts.
double frobenius_norm(const Tensor& t);
double frobenius_norm(std::span<const double> x);

// sum_r lambda_r * outer(factors[0].col(r), ..., factors[N-1].col(r)).
// Factors must share column count and be non-empty; order = factors.size().
Tensor kruskal_to_tensor(const std::vector<Matrix>& factors, const Vector& lambda);

// Stacks per-time, per-subject 3-way volumes (I1 x I2 x I3) into the 4-way
// spatially folded array I1 x (I2*I3) x N x S whose slice (:,:,n,s) is the
// mode-0 matricization of subjects[s][n]. All volumes must share one shape.
Tensor fold_volume_sequence(const std::vector<std::vector<Tensor>>& subjects);

// Single-subject variant: I1 x (I2*I3) x N.
Tensor fold_volume_sequence(const std::vector<Tensor>& volumes);

// max |a - b| over all elements; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace mlbss
