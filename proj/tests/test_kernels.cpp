#include <doctest.h>

#include "mlbss/kernels.hpp"
#include "mlbss/tensor.hpp"
#include "oracles.hpp"

using namespace mlbss;

// The OpenMP kernels must agree with their serial reference twins: bitwise
// for copy-type kernels (identical per-element arithmetic), and to tight
// relative tolerance for reductions (chunked summation reorders additions).

TEST_CASE("parallel and serial unfold/fold agree bitwise") {
  std::mt19937_64 rng(101);
  // Second shape is large enough to cross the parallel cutoff.
  for (const auto& shape :
       std::vector<std::vector<std::size_t>>{{4, 5, 3}, {41, 37, 23}, {7, 6, 5, 4}}) {
    Tensor t = oracles::random_tensor(rng, shape);
    for (std::size_t mode = 0; mode < shape.size(); ++mode) {
      Matrix a(t.dim(mode), t.size() / t.dim(mode));
      Matrix b = a;
      kernels::unfold_into(t, mode, a);
      kernels::unfold_into_serial(t, mode, b);
      CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);

      Tensor ta(shape), tb(shape);
      kernels::fold_into(a, mode, ta);
      kernels::fold_into_serial(a, mode, tb);
      CHECK(ta == tb);
      CHECK(ta == t);
    }
  }
}

TEST_CASE("parallel and serial khatri_rao agree bitwise") {
  std::mt19937_64 rng(103);
  Matrix a = oracles::random_matrix(rng, 130, 40);
  Matrix b = oracles::random_matrix(rng, 170, 40);
  Matrix p(130 * 170, 40), s(130 * 170, 40);
  kernels::khatri_rao_into(a, b, p);
  kernels::khatri_rao_into_serial(a, b, s);
  CHECK((p - s).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("chunked reductions match serial within rounding") {
  std::mt19937_64 rng(107);
  std::vector<double> x(200001), y(200001);
  std::normal_distribution<double> g;
  for (auto& v : x) v = g(rng);
  for (auto& v : y) v = g(rng);
  const double ss_p = kernels::sum_squares(x);
  const double ss_s = kernels::sum_squares_serial(x);
  CHECK(ss_p == doctest::Approx(ss_s).epsilon(1e-13));
  const double d_p = kernels::dot(x, y);
  const double d_s = kernels::dot_serial(x, y);
  CHECK(d_p == doctest::Approx(d_s).epsilon(1e-12));
  // Same input, same call => identical result (fixed chunk grid).
  CHECK(kernels::sum_squares(x) == ss_p);
}

TEST_CASE("kruskal_full parallel, serial and oracle agree") {
  std::mt19937_64 rng(109);
  for (const auto& shape :
       std::vector<std::vector<std::size_t>>{{4, 3, 5}, {3, 2, 2, 4}, {2, 3, 2, 2, 2}, {6, 7}}) {
    std::vector<Matrix> factors;
    for (auto d : shape)
      factors.push_back(oracles::random_matrix(rng, static_cast<Eigen::Index>(d), 4));
    Vector lambda(4);
    lambda << 1.5, -2.0, 0.75, 1.0;
    Tensor tp(shape), ts(shape);
    kernels::kruskal_full(factors, lambda, tp);
    kernels::kruskal_full_serial(factors, lambda, ts);
    CHECK(tp == ts);
    Tensor want = oracles::naive_kruskal_full(factors, lambda);
    CHECK(max_abs_diff(tp, want) < 1e-12);
  }
}

TEST_CASE("lowrank_outer_full parallel, serial and oracle agree") {
  std::mt19937_64 rng(113);
  const std::size_t i1 = 6, i2 = 5, i3 = 4, i4 = 3, r = 2;
  std::vector<Matrix> x, y, slabs;
  for (std::size_t k = 0; k < r; ++k) {
    x.push_back(oracles::random_matrix(rng, i1, 2));
    y.push_back(oracles::random_matrix(rng, i2, 2));
    slabs.push_back(x.back() * y.back().transpose());
  }
  Matrix b = oracles::random_matrix(rng, i3, r);
  Matrix c = oracles::random_matrix(rng, i4, r);

  SUBCASE("three-way") {
    Tensor tp({i1, i2, i3}), ts({i1, i2, i3});
    kernels::lowrank_outer_full(slabs, b, nullptr, tp);
    kernels::lowrank_outer_full_serial(slabs, b, nullptr, ts);
    CHECK(tp == ts);
    Tensor want = oracles::naive_block_term_full(x, y, b, Matrix());
    CHECK(max_abs_diff(tp, want) < 1e-12);
  }
  SUBCASE("four-way") {
    Tensor tp({i1, i2, i3, i4}), ts({i1, i2, i3, i4});
    kernels::lowrank_outer_full(slabs, b, &c, tp);
    kernels::lowrank_outer_full_serial(slabs, b, &c, ts);
    CHECK(tp == ts);
    Tensor want = oracles::naive_block_term_full(x, y, b, c);
    CHECK(max_abs_diff(tp, want) < 1e-12);
  }
}
