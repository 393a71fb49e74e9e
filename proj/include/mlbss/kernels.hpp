#pragma once

#include <span>
#include <vector>

#include "mlbss/tensor.hpp"

namespace mlbss::kernels {

// Data-parallel kernels behind the public tensor ops and the solvers.
//
// Every kernel ships in two variants: a `_serial` reference implementation
// (plain loops, kept for tests and the benchmark) and an unsuffixed default
// that parallelizes with OpenMP when the problem is large enough. Copy-type
// kernels produce bitwise-identical output in both variants; the reductions
// accumulate over a fixed chunk grid combined in chunk order, so their result
// does not depend on the thread count either.

void unfold_into_serial(const Tensor& t, std::size_t mode, Matrix& out);
void unfold_into(const Tensor& t, std::size_t mode, Matrix& out);

void fold_into_serial(const Matrix& m, std::size_t mode, Tensor& out);
void fold_into(const Matrix& m, std::size_t mode, Tensor& out);

void khatri_rao_into_serial(const Matrix& a, const Matrix& b, Matrix& out);
void khatri_rao_into(const Matrix& a, const Matrix& b, Matrix& out);

double sum_squares_serial(std::span<const double> x);
double sum_squares(std::span<const double> x);

double dot_serial(std::span<const double> x, std::span<const double> y);
double dot(std::span<const double> x, std::span<const double> y);

// out(i0,...,i_{N-1}) = sum_r lambda_r * prod_n factors[n](i_n, r).
// out must be preshaped; N = factors.size() = out.order().
void kruskal_full_serial(const std::vector<Matrix>& factors, const Vector& lambda, Tensor& out);
void kruskal_full(const std::vector<Matrix>& factors, const Vector& lambda, Tensor& out);

// Block-term reconstruction from precomputed spatial slabs:
//   out(i,j,k)   = sum_r slabs[r](i,j) * b(k,r)            (c == nullptr)
//   out(i,j,k,l) = sum_r slabs[r](i,j) * b(k,r) * c(l,r)   (c != nullptr)
// out must be preshaped to match.
void lowrank_outer_full_serial(const std::vector<Matrix>& slabs, const Matrix& b,
                               const Matrix* c, Tensor& out);
void lowrank_outer_full(const std::vector<Matrix>& slabs, const Matrix& b, const Matrix* c,
                        Tensor& out);

}  // namespace mlbss::kernels
