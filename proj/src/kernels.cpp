#include "mlbss/kernels.hpp"

#include <algorithm>
#include <array>
#include <cstring>

namespace mlbss::kernels {

namespace {

// Work below this many elements is not worth a parallel region.
constexpr std::size_t kParallelCutoff = 1 << 14;

// Reductions accumulate over this fixed grid regardless of thread count.
constexpr std::size_t kReduceChunks = 64;

struct UnfoldGeometry {
  std::size_t before = 1;   // product of dims below `mode`
  std::size_t n = 1;        // dim(mode)
  std::size_t after = 1;    // product of dims above `mode`
};

UnfoldGeometry geometry(const Tensor& t, std::size_t mode) {
  UnfoldGeometry g;
  for (std::size_t k = 0; k < t.order(); ++k) {
    if (k < mode) g.before *= t.dim(k);
    if (k == mode) g.n = t.dim(k);
    if (k > mode) g.after *= t.dim(k);
  }
  return g;
}

// Shared loop bodies; `parallel` toggles the OpenMP pragma so the serial
// reference and the default path cannot drift apart.

void unfold_impl(const Tensor& t, std::size_t mode, Matrix& out, bool parallel) {
  const UnfoldGeometry g = geometry(t, mode);
  const double* src = t.data();
  if (mode == 0) {
    // Mode-0 unfolding is the flat layout itself.
    std::memcpy(out.data(), src, sizeof(double) * t.size());
    return;
  }
  const std::ptrdiff_t na = static_cast<std::ptrdiff_t>(g.after);
#pragma omp parallel for schedule(static) if (parallel && t.size() >= kParallelCutoff)
  for (std::ptrdiff_t a = 0; a < na; ++a) {
    for (std::size_t i = 0; i < g.n; ++i) {
      const double* block = src + g.before * (i + g.n * static_cast<std::size_t>(a));
      for (std::size_t b = 0; b < g.before; ++b)
        out(static_cast<Eigen::Index>(i),
            static_cast<Eigen::Index>(b + g.before * static_cast<std::size_t>(a))) = block[b];
    }
  }
}

void fold_impl(const Matrix& m, std::size_t mode, Tensor& out, bool parallel) {
  const UnfoldGeometry g = geometry(out, mode);
  double* dst = out.data();
  if (mode == 0) {
    std::memcpy(dst, m.data(), sizeof(double) * out.size());
    return;
  }
  const std::ptrdiff_t na = static_cast<std::ptrdiff_t>(g.after);
#pragma omp parallel for schedule(static) if (parallel && out.size() >= kParallelCutoff)
  for (std::ptrdiff_t a = 0; a < na; ++a) {
    for (std::size_t i = 0; i < g.n; ++i) {
      double* block = dst + g.before * (i + g.n * static_cast<std::size_t>(a));
      for (std::size_t b = 0; b < g.before; ++b)
        block[b] = m(static_cast<Eigen::Index>(i),
                     static_cast<Eigen::Index>(b + g.before * static_cast<std::size_t>(a)));
    }
  }
}

void khatri_rao_impl(const Matrix& a, const Matrix& b, Matrix& out, bool parallel) {
  const Eigen::Index ra = a.rows(), rb = b.rows(), cols = a.cols();
#pragma omp parallel for schedule(static) if (parallel && static_cast<std::size_t>(ra* rb* cols) >= kParallelCutoff)
  for (Eigen::Index r = 0; r < cols; ++r)
    for (Eigen::Index i = 0; i < ra; ++i)
      out.block(i * rb, r, rb, 1) = a(i, r) * b.col(r);
}

double chunked_reduce(std::span<const double> x, std::span<const double> y, bool parallel) {
  const std::size_t n = x.size();
  if (n < kParallelCutoff || !parallel) {
    double acc = 0.0;
    if (y.empty())
      for (std::size_t i = 0; i < n; ++i) acc += x[i] * x[i];
    else
      for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
  }
  std::array<double, kReduceChunks> partial{};
  const std::ptrdiff_t nc = static_cast<std::ptrdiff_t>(kReduceChunks);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < nc; ++c) {
    const std::size_t lo = n * static_cast<std::size_t>(c) / kReduceChunks;
    const std::size_t hi = n * static_cast<std::size_t>(c + 1) / kReduceChunks;
    double acc = 0.0;
    if (y.empty())
      for (std::size_t i = lo; i < hi; ++i) acc += x[i] * x[i];
    else
      for (std::size_t i = lo; i < hi; ++i) acc += x[i] * y[i];
    partial[static_cast<std::size_t>(c)] = acc;
  }
  double total = 0.0;
  for (double p : partial) total += p;  // fixed order: thread-count independent
  return total;
}

void kruskal_full_impl(const std::vector<Matrix>& factors, const Vector& lambda, Tensor& out,
                       bool parallel) {
  const std::size_t order = factors.size();
  const Eigen::Index rank = lambda.size();
  std::fill(out.span().begin(), out.span().end(), 0.0);
  double* dst = out.data();
  const Matrix& a = factors[0];
  const Eigen::Index i0 = a.rows();

  if (order == 3) {
    const Matrix& b = factors[1];
    const Matrix& c = factors[2];
    const Eigen::Index i1 = b.rows(), i2 = c.rows();
#pragma omp parallel for schedule(static) if (parallel && out.size() >= kParallelCutoff)
    for (Eigen::Index k = 0; k < i2; ++k)
      for (Eigen::Index r = 0; r < rank; ++r) {
        const double wk = lambda(r) * c(k, r);
        for (Eigen::Index j = 0; j < i1; ++j) {
          Eigen::Map<Vector> col(dst + i0 * (j + i1 * k), i0);
          col += (wk * b(j, r)) * a.col(r);
        }
      }
    return;
  }
  if (order == 4) {
    const Matrix& b = factors[1];
    const Matrix& c = factors[2];
    const Matrix& d = factors[3];
    const Eigen::Index i1 = b.rows(), i2 = c.rows(), i3 = d.rows();
    const Eigen::Index outer = i2 * i3;
#pragma omp parallel for schedule(static) if (parallel && out.size() >= kParallelCutoff)
    for (Eigen::Index kl = 0; kl < outer; ++kl) {
      const Eigen::Index k = kl % i2, l = kl / i2;
      for (Eigen::Index r = 0; r < rank; ++r) {
        const double wkl = lambda(r) * c(k, r) * d(l, r);
        for (Eigen::Index j = 0; j < i1; ++j) {
          Eigen::Map<Vector> col(dst + i0 * (j + i1 * kl), i0);
          col += (wkl * b(j, r)) * a.col(r);
        }
      }
    }
    return;
  }

  // Orders 1, 2, 5: generic index walk over the trailing modes.
  std::size_t rest = 1;
  for (std::size_t k = 1; k < order; ++k) rest *= static_cast<std::size_t>(factors[k].rows());
  const std::ptrdiff_t nrest = static_cast<std::ptrdiff_t>(rest);
#pragma omp parallel for schedule(static) if (parallel && out.size() >= kParallelCutoff)
  for (std::ptrdiff_t p = 0; p < nrest; ++p) {
    std::size_t idx = static_cast<std::size_t>(p);
    std::array<Eigen::Index, 4> trail{};
    for (std::size_t k = 1; k < order; ++k) {
      const std::size_t d = static_cast<std::size_t>(factors[k].rows());
      trail[k - 1] = static_cast<Eigen::Index>(idx % d);
      idx /= d;
    }
    Eigen::Map<Vector> col(dst + static_cast<std::size_t>(i0) * static_cast<std::size_t>(p), i0);
    for (Eigen::Index r = 0; r < rank; ++r) {
      double w = lambda(r);
      for (std::size_t k = 1; k < order; ++k) w *= factors[k](trail[k - 1], r);
      col += w * a.col(r);
    }
  }
}

void lowrank_outer_full_impl(const std::vector<Matrix>& slabs, const Matrix& b, const Matrix* c,
                             Tensor& out, bool parallel) {
  const Eigen::Index rank = b.cols();
  const std::size_t slab_size = out.dim(0) * out.dim(1);
  const Eigen::Index kdim = b.rows();
  const Eigen::Index ldim = (c != nullptr) ? c->rows() : 1;
  double* dst = out.data();
  const Eigen::Index outer = kdim * ldim;
#pragma omp parallel for schedule(static) if (parallel && out.size() >= kParallelCutoff)
  for (Eigen::Index kl = 0; kl < outer; ++kl) {
    const Eigen::Index k = kl % kdim, l = kl / kdim;
    Eigen::Map<Vector> slab(dst + slab_size * static_cast<std::size_t>(kl), slab_size);
    slab.setZero();
    for (Eigen::Index r = 0; r < rank; ++r) {
      const double w = (c != nullptr) ? b(k, r) * (*c)(l, r) : b(k, r);
      if (w == 0.0) continue;
      slab += w * Eigen::Map<const Vector>(slabs[static_cast<std::size_t>(r)].data(), slab_size);
    }
  }
}

}  // namespace

void unfold_into_serial(const Tensor& t, std::size_t mode, Matrix& out) {
  unfold_impl(t, mode, out, false);
}
void unfold_into(const Tensor& t, std::size_t mode, Matrix& out) {
  unfold_impl(t, mode, out, true);
}

void fold_into_serial(const Matrix& m, std::size_t mode, Tensor& out) {
  fold_impl(m, mode, out, false);
}
void fold_into(const Matrix& m, std::size_t mode, Tensor& out) { fold_impl(m, mode, out, true); }

void khatri_rao_into_serial(const Matrix& a, const Matrix& b, Matrix& out) {
  khatri_rao_impl(a, b, out, false);
}
void khatri_rao_into(const Matrix& a, const Matrix& b, Matrix& out) {
  khatri_rao_impl(a, b, out, true);
}

double sum_squares_serial(std::span<const double> x) { return chunked_reduce(x, {}, false); }
double sum_squares(std::span<const double> x) { return chunked_reduce(x, {}, true); }

double dot_serial(std::span<const double> x, std::span<const double> y) {
  return chunked_reduce(x, y, false);
}
double dot(std::span<const double> x, std::span<const double> y) {
  return chunked_reduce(x, y, true);
}

void kruskal_full_serial(const std::vector<Matrix>& factors, const Vector& lambda, Tensor& out) {
  kruskal_full_impl(factors, lambda, out, false);
}
void kruskal_full(const std::vector<Matrix>& factors, const Vector& lambda, Tensor& out) {
  kruskal_full_impl(factors, lambda, out, true);
}

void lowrank_outer_full_serial(const std::vector<Matrix>& slabs, const Matrix& b, const Matrix* c,
                               Tensor& out) {
  lowrank_outer_full_impl(slabs, b, c, out, false);
}
void lowrank_outer_full(const std::vector<Matrix>& slabs, const Matrix& b, const Matrix* c,
                        Tensor& out) {
  lowrank_outer_full_impl(slabs, b, c, out, true);
}

}  // namespace mlbss::kernels
