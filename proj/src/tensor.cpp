#include "mlbss/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "mlbss/kernels.hpp"

namespace mlbss {

namespace {

constexpr std::size_t kMaxOrder = 5;

std::size_t checked_size(const std::vector<std::size_t>& shape) {
  if (shape.empty() || shape.size() > kMaxOrder) {
    std::ostringstream msg;
    msg << "tensor order must be in [1, " << kMaxOrder << "], got " << shape.size();
    throw ArgumentError(msg.str());
  }
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw ArgumentError("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape) {
  const std::size_t n = checked_size(shape);
  shape_ = std::move(shape);
  data_.assign(n, 0.0);
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data) {
  const std::size_t n = checked_size(shape);
  if (n != data.size()) throw ArgumentError("data length does not match shape");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  return t;
}

std::size_t Tensor::dim(std::size_t mode) const {
  if (mode >= shape_.size()) throw ArgumentError("mode out of range");
  return shape_[mode];
}

std::size_t Tensor::offset_checked(std::span<const std::size_t> index) const {
  if (index.size() != shape_.size()) throw ArgumentError("index arity does not match order");
  std::size_t off = 0;
  for (std::size_t k = index.size(); k-- > 0;) {
    if (index[k] >= shape_[k]) throw ArgumentError("index out of bounds");
    off = off * shape_[k] + index[k];
  }
  return off;
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  const std::size_t n = checked_size(shape);
  if (n != size()) throw ArgumentError("reshape must preserve element count");
  return from_data(std::move(shape), data_);
}

Matrix unfold(const Tensor& t, std::size_t mode) {
  if (mode >= t.order()) throw ArgumentError("unfold: mode out of range");
  Matrix out(t.dim(mode), t.size() / t.dim(mode));
  kernels::unfold_into(t, mode, out);
  return out;
}

Tensor fold(const Matrix& m, std::size_t mode, const std::vector<std::size_t>& shape) {
  Tensor out(shape);
  if (mode >= out.order()) throw ArgumentError("fold: mode out of range");
  if (static_cast<std::size_t>(m.rows()) != out.dim(mode) ||
      static_cast<std::size_t>(m.cols()) != out.size() / out.dim(mode)) {
    throw ArgumentError("fold: matrix shape does not match target shape");
  }
  kernels::fold_into(m, mode, out);
  return out;
}

Matrix khatri_rao(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ArgumentError("khatri_rao: column counts differ");
  Matrix out(a.rows() * b.rows(), a.cols());
  kernels::khatri_rao_into(a, b, out);
  return out;
}

Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index ca = 0; ca < a.cols(); ++ca)
    for (Eigen::Index ra = 0; ra < a.rows(); ++ra)
      out.block(ra * b.rows(), ca * b.cols(), b.rows(), b.cols()) = a(ra, ca) * b;
  return out;
}

double frobenius_norm(std::span<const double> x) { return std::sqrt(kernels::sum_squares(x)); }

double frobenius_norm(const Tensor& t) { return frobenius_norm(t.span()); }

Tensor kruskal_to_tensor(const std::vector<Matrix>& factors, const Vector& lambda) {
  if (factors.empty()) throw ArgumentError("kruskal_to_tensor: no factors");
  const Eigen::Index r = factors.front().cols();
  if (lambda.size() != r) throw ArgumentError("kruskal_to_tensor: lambda length != rank");
  std::vector<std::size_t> shape;
  for (const Matrix& f : factors) {
    if (f.cols() != r) throw ArgumentError("kruskal_to_tensor: factor column counts differ");
    shape.push_back(static_cast<std::size_t>(f.rows()));
  }
  Tensor out(shape);
  kernels::kruskal_full(factors, lambda, out);
  return out;
}

Tensor fold_volume_sequence(const std::vector<std::vector<Tensor>>& subjects) {
  if (subjects.empty() || subjects.front().empty())
    throw ArgumentError("fold_volume_sequence: empty sequence");
  const std::vector<std::size_t>& vshape = subjects.front().front().shape();
  if (vshape.size() != 3) throw ArgumentError("fold_volume_sequence: volumes must be 3-way");
  const std::size_t n_times = subjects.front().size();
  for (const auto& series : subjects) {
    if (series.size() != n_times)
      throw ArgumentError("fold_volume_sequence: subjects have differing time counts");
    for (const Tensor& v : series)
      if (v.shape() != vshape)
        throw ArgumentError("fold_volume_sequence: volumes have differing shapes");
  }
  const std::size_t i1 = vshape[0], slice = vshape[1] * vshape[2];
  Tensor out({i1, slice, n_times, subjects.size()});
  double* dst = out.data();
  const std::size_t per_volume = i1 * slice;
  for (std::size_t s = 0; s < subjects.size(); ++s)
    for (std::size_t n = 0; n < n_times; ++n) {
      // The volume's flat layout already is its mode-0 matricization.
      const double* src = subjects[s][n].data();
      std::copy(src, src + per_volume, dst + per_volume * (n + n_times * s));
    }
  return out;
}

Tensor fold_volume_sequence(const std::vector<Tensor>& volumes) {
  Tensor four = fold_volume_sequence(std::vector<std::vector<Tensor>>{volumes});
  const auto& s = four.shape();
  return four.reshaped({s[0], s[1], s[2]});
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ArgumentError("max_abs_diff: shapes differ");
  double m = 0.0;
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(pa[i] - pb[i]));
  return m;
}

}  // namespace mlbss
