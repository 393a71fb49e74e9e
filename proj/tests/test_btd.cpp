#include <doctest.h>

#include <cmath>

#include "mlbss/btd.hpp"
#include "mlbss/cpd.hpp"
#include "mlbss/random.hpp"
#include "oracles.hpp"

using namespace mlbss;

namespace {

// Planted block-term model with well-conditioned factors.
BtdModel planted_btd(std::mt19937_64& rng, std::size_t i1, std::size_t i2, std::size_t i3,
                     std::size_t i4, const std::vector<std::size_t>& ranks) {
  BtdModel m;
  for (std::size_t l : ranks) {
    BtdTerm term;
    term.L = l;
    term.X = oracles::random_matrix(rng, static_cast<Eigen::Index>(i1),
                                    static_cast<Eigen::Index>(l));
    term.Y = oracles::random_matrix(rng, static_cast<Eigen::Index>(i2),
                                    static_cast<Eigen::Index>(l));
    term.b = oracles::random_matrix(rng, static_cast<Eigen::Index>(i3), 1).col(0).normalized();
    if (i4 > 0)
      term.c = oracles::random_matrix(rng, static_cast<Eigen::Index>(i4), 1).col(0).normalized();
    m.terms.push_back(std::move(term));
  }
  return m;
}

double rel_error(const Tensor& a, const Tensor& b) {
  double num = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.span()[i] - b.span()[i];
    num += d * d;
  }
  return std::sqrt(num) / frobenius_norm(b);
}

// Greedy-free matching for tiny R: best |cosine| of each planted vector
// against any recovered one.
double min_matched_abs_cos(const Matrix& truth, const Matrix& est) {
  double worst = 1.0;
  for (Eigen::Index i = 0; i < truth.cols(); ++i) {
    double best = 0.0;
    for (Eigen::Index j = 0; j < est.cols(); ++j) {
      const double denom = truth.col(i).norm() * est.col(j).norm();
      if (denom > 0.0)
        best = std::max(best, std::abs(truth.col(i).dot(est.col(j))) / denom);
    }
    worst = std::min(worst, best);
  }
  return worst;
}

}  // namespace

// ===========================================================================
// Reconstruction
// ===========================================================================

TEST_CASE("btd_to_tensor matches the brute-force oracle") {
  std::mt19937_64 rng(307);
  BtdModel m = planted_btd(rng, 4, 4, 3, 0, {2, 2});
  std::vector<Matrix> x{m.terms[0].X, m.terms[1].X}, y{m.terms[0].Y, m.terms[1].Y};
  Matrix b(3, 2);
  b.col(0) = m.terms[0].b;
  b.col(1) = m.terms[1].b;
  Tensor got = btd_to_tensor(m);
  Tensor want = oracles::naive_block_term_full(x, y, b, Matrix());
  CHECK(max_abs_diff(got, want) < 1e-12);

  BtdModel m4 = planted_btd(rng, 5, 4, 3, 2, {2, 1, 3});
  std::vector<Matrix> x4, y4;
  Matrix b4(3, 3), c4(2, 3);
  for (int r = 0; r < 3; ++r) {
    x4.push_back(m4.terms[r].X);
    y4.push_back(m4.terms[r].Y);
    b4.col(r) = m4.terms[r].b;
    c4.col(r) = m4.terms[r].c;
  }
  CHECK(max_abs_diff(btd_to_tensor(m4), oracles::naive_block_term_full(x4, y4, b4, c4)) < 1e-12);
}

TEST_CASE("a single L=1 term is a rank-1 Kruskal tensor") {
  std::mt19937_64 rng(311);
  BtdModel m = planted_btd(rng, 5, 6, 4, 0, {1});
  KruskalModel k;
  k.factors = {m.terms[0].X, m.terms[0].Y, Matrix(m.terms[0].b)};
  k.lambda = Vector::Ones(1);
  CHECK(max_abs_diff(btd_to_tensor(m), kruskal_to_tensor(k)) < 1e-14);
}

TEST_CASE("all b_r = e_k puts the slab sum in frontal slice k") {
  std::mt19937_64 rng(313);
  BtdModel m = planted_btd(rng, 4, 5, 6, 0, {2, 3});
  Vector ek = Vector::Zero(6);
  ek(2) = 1.0;
  m.terms[0].b = ek;
  m.terms[1].b = ek;
  Tensor t = btd_to_tensor(m);
  Matrix want = m.terms[0].X * m.terms[0].Y.transpose() +
                m.terms[1].X * m.terms[1].Y.transpose();
  for (std::size_t k = 0; k < 6; ++k)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t i = 0; i < 4; ++i) {
        const double expect = (k == 2) ? want(static_cast<Eigen::Index>(i),
                                              static_cast<Eigen::Index>(j))
                                       : 0.0;
        CHECK(t(i, j, k) == doctest::Approx(expect).epsilon(1e-13));
      }
}

TEST_CASE("btd_to_tensor is invariant under (XF, YF^-T) gauge changes") {
  std::mt19937_64 rng(317);
  BtdModel m = planted_btd(rng, 6, 7, 5, 0, {3, 2});
  Tensor base = btd_to_tensor(m);
  for (auto& term : m.terms) {
    Matrix f = oracles::random_matrix(rng, term.X.cols(), term.X.cols());
    f += 3.0 * Matrix::Identity(f.rows(), f.cols());  // keep well-conditioned
    term.X = term.X * f;
    term.Y = term.Y * f.inverse().transpose();
  }
  CHECK(rel_error(btd_to_tensor(m), base) < 1e-10);
}

TEST_CASE("btd_to_tensor rejects inconsistent terms") {
  std::mt19937_64 rng(331);
  BtdModel m = planted_btd(rng, 4, 4, 3, 0, {2, 2});
  m.terms[1].Y = oracles::random_matrix(rng, 5, 2);  // wrong row count
  CHECK_THROWS_AS(btd_to_tensor(m), ArgumentError);
  BtdModel empty_model;
  CHECK_THROWS_AS(btd_to_tensor(empty_model), ArgumentError);
}

// ===========================================================================
// 3-way solver
// ===========================================================================

TEST_CASE("btd_llr1 recovers a planted rank-(2,2,1) model") {
  std::mt19937_64 rng(337);
  BtdModel truth = planted_btd(rng, 9, 8, 6, 0, {2, 2});
  Tensor t = btd_to_tensor(truth);
  SolverOptions opts;
  opts.seed = 41;
  BtdResult res = btd_llr1(t, {2, 2}, opts);

  CHECK(rel_error(btd_to_tensor(res.model), t) <= 1e-8);
  // Spans match up to term permutation: compare by principal angles.
  for (const auto& planted : truth.terms) {
    double best_angle = 1e9;
    for (const auto& got : res.model.terms) {
      const auto angles = oracles::principal_angles(planted.X, got.X);
      best_angle = std::min(best_angle, angles.back());
    }
    CHECK(best_angle <= 1e-4);
  }
  CHECK(res.uniqueness.all_ok);
  CHECK(res.history.converged);
}

TEST_CASE("btd_llr1 fit history is non-decreasing within 1e-10") {
  std::mt19937_64 rng(347);
  Tensor t = oracles::random_tensor(rng, {8, 7, 9});
  SolverOptions opts;
  opts.seed = 3;
  opts.restarts = 2;
  opts.max_iters = 50;
  BtdResult res = btd_llr1(t, {2, 3}, opts);
  const auto& fits = res.history.fits;
  REQUIRE(fits.size() > 2);
  for (std::size_t i = 1; i < fits.size(); ++i) CHECK(fits[i] >= fits[i - 1] - 1e-10);
}

TEST_CASE("btd_llr1 with unit term ranks matches cpd_als") {
  std::mt19937_64 rng(349);
  KruskalModel truth;
  truth.factors = {oracles::random_matrix(rng, 7, 2), oracles::random_matrix(rng, 6, 2),
                   oracles::random_matrix(rng, 5, 2)};
  truth.lambda = Vector::Ones(2);
  Tensor t = kruskal_to_tensor(truth);
  SolverOptions opts;
  opts.seed = 11;
  BtdResult bres = btd_llr1(t, {1, 1}, opts);
  CpdResult cres = cpd_als(t, 2, opts);
  CHECK(std::abs(bres.history.fits.back() - cres.history.fits.back()) < 1e-10);
}

TEST_CASE("btd_llr1 tolerates overestimated term ranks") {
  std::mt19937_64 rng(353);
  BtdModel truth = planted_btd(rng, 10, 9, 7, 0, {2, 2});
  Tensor t = btd_to_tensor(truth);
  SolverOptions opts;
  opts.seed = 23;
  const double fit_exact = btd_llr1(t, {2, 2}, opts).history.fits.back();
  const double fit_over = btd_llr1(t, {3, 3}, opts).history.fits.back();
  CHECK(fit_over >= fit_exact - 1e-8);
  CHECK(fit_over >= 1.0 - 1e-6);
}

TEST_CASE("btd_llr1 validates input") {
  std::mt19937_64 rng(359);
  Tensor t = oracles::random_tensor(rng, {6, 5, 4});
  CHECK_THROWS_AS(btd_llr1(t, {}, {}), ArgumentError);
  CHECK_THROWS_AS(btd_llr1(t, {6}, {}), ArgumentError);  // > min(I1, I2)
  CHECK_THROWS_AS(btd_llr1(t, {0}, {}), ArgumentError);
  Tensor t4 = oracles::random_tensor(rng, {4, 4, 3, 2});
  CHECK_THROWS_AS(btd_llr1(t4, {2}, {}), ArgumentError);
  Tensor z({4, 4, 3});
  CHECK_THROWS_AS(btd_llr1(z, {2}, {}), ArgumentError);
  SolverOptions bad;
  bad.restarts = 0;
  CHECK_THROWS_AS(btd_llr1(t, {2}, bad), ArgumentError);
}

TEST_CASE("btd_llr1 is deterministic for a fixed seed") {
  std::mt19937_64 rng(367);
  Tensor t = oracles::random_tensor(rng, {7, 6, 5});
  SolverOptions opts;
  opts.seed = 4;
  opts.restarts = 2;
  opts.max_iters = 30;
  BtdResult a = btd_llr1(t, {2, 2}, opts);
  BtdResult b = btd_llr1(t, {2, 2}, opts);
  CHECK(a.history.fits.back() == b.history.fits.back());
  for (std::size_t r = 0; r < 2; ++r) {
    CHECK((a.model.terms[r].X - b.model.terms[r].X).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.model.terms[r].b - b.model.terms[r].b).cwiseAbs().maxCoeff() == 0.0);
  }
}

// ===========================================================================
// 4-way solver: nested and direct paths
// ===========================================================================

TEST_CASE("btd_llr11 recovers a planted rank-(2,2,1,1) model") {
  std::mt19937_64 rng(373);
  BtdModel truth = planted_btd(rng, 8, 9, 5, 4, {2, 2, 2});
  Tensor t = btd_to_tensor(truth);
  SolverOptions opts;
  opts.seed = 51;
  opts.tol = 1e-11;
  BtdResult res = btd_llr11(t, {2, 2, 2}, opts);
  CHECK(rel_error(btd_to_tensor(res.model), t) <= 1e-8);

  Matrix truth_b(5, 3), truth_c(4, 3), est_b(5, 3), est_c(4, 3);
  for (int r = 0; r < 3; ++r) {
    truth_b.col(r) = truth.terms[r].b;
    truth_c.col(r) = truth.terms[r].c;
    est_b.col(r) = res.model.terms[r].b;
    est_c.col(r) = res.model.terms[r].c;
  }
  CHECK(min_matched_abs_cos(truth_b, est_b) >= 0.9999);
  CHECK(min_matched_abs_cos(truth_c, est_c) >= 0.9999);
}

TEST_CASE("nested and direct 4-way paths agree on noiseless data") {
  std::mt19937_64 rng(379);
  BtdModel truth = planted_btd(rng, 7, 8, 5, 3, {2, 2});
  Tensor t = btd_to_tensor(truth);
  SolverOptions opts;
  opts.seed = 61;
  opts.max_iters = 800;
  Tensor nested = btd_to_tensor(btd_llr11(t, {2, 2}, opts).model);
  Tensor direct = btd_to_tensor(btd_llr11_direct(t, {2, 2}, opts).model);
  CHECK(rel_error(nested, t) <= 1e-7);
  CHECK(rel_error(direct, t) <= 1e-7);
  CHECK(rel_error(nested, direct) <= 1e-6);
}

TEST_CASE("btd_llr11 with a single subject reduces to btd_llr1") {
  std::mt19937_64 rng(383);
  BtdModel truth = planted_btd(rng, 8, 7, 6, 0, {2});
  Tensor t3 = btd_to_tensor(truth);
  Tensor t4 = t3.reshaped({8, 7, 6, 1});
  SolverOptions opts;
  opts.seed = 13;
  Tensor rec3 = btd_to_tensor(btd_llr1(t3, {2}, opts).model);
  BtdResult res4 = btd_llr11(t4, {2}, opts);
  Tensor rec4 = btd_to_tensor(res4.model);
  CHECK(res4.model.four_way());
  CHECK(max_abs_diff(rec4.reshaped({8, 7, 6}), rec3) < 1e-10);
}

TEST_CASE("4-way solvers fix the sign of the largest entry of b_r") {
  std::mt19937_64 rng(389);
  BtdModel truth = planted_btd(rng, 7, 6, 5, 4, {2, 2});
  Tensor t = btd_to_tensor(truth);
  SolverOptions opts;
  opts.seed = 29;
  for (const auto& res : {btd_llr11(t, {2, 2}, opts), btd_llr11_direct(t, {2, 2}, opts)}) {
    for (const auto& term : res.model.terms) {
      if (term.empty) continue;
      Eigen::Index idx = 0;
      term.b.cwiseAbs().maxCoeff(&idx);
      CHECK(term.b(idx) > 0.0);
    }
  }
}

TEST_CASE("adapted_btd handles mixed ranks and validates them") {
  std::mt19937_64 rng(397);
  BtdModel truth = planted_btd(rng, 10, 9, 6, 3, {2, 2, 4});
  Tensor t = btd_to_tensor(truth);
  SolverOptions opts;
  opts.seed = 71;
  BtdResult res = adapted_btd(t, 2, 2, 1, 4, opts);
  REQUIRE(res.model.terms.size() == 3);
  CHECK(res.model.terms[0].L == 2);
  CHECK(res.model.terms[2].L == 4);
  CHECK(rel_error(btd_to_tensor(res.model), t) <= 1e-6);
  CHECK_THROWS_AS(adapted_btd(t, 2, 3, 1, 3, opts), ArgumentError);  // L_high <= L
  CHECK_THROWS_AS(adapted_btd(t, 0, 2, 0, 4, opts), ArgumentError);  // no terms

  // Containment: n_high = 0 takes the uniform-rank path.
  SolverOptions quick = opts;
  quick.max_iters = 25;
  quick.restarts = 1;
  Tensor a = btd_to_tensor(adapted_btd(t, 3, 2, 0, 9, quick).model);
  Tensor b = btd_to_tensor(btd_llr11(t, {2, 2, 2}, quick).model);
  CHECK(max_abs_diff(a, b) == 0.0);
}

// ===========================================================================
// Uniqueness preconditions
// ===========================================================================

TEST_CASE("uniqueness_preconditions passes a generic planted model") {
  std::mt19937_64 rng(401);
  BtdModel m = planted_btd(rng, 9, 10, 6, 4, {2, 2});
  UniquenessReport rep = uniqueness_preconditions(m);
  CHECK(rep.x_rank == 4);
  CHECK(rep.x_full_rank);
  CHECK(rep.y_full_rank);
  CHECK(rep.b_ok);
  CHECK(rep.c_ok);
  CHECK(rep.g_ok);
  CHECK(rep.all_ok);
}

TEST_CASE("uniqueness_preconditions flags collinear G columns") {
  std::mt19937_64 rng(409);
  BtdModel m = planted_btd(rng, 8, 8, 5, 4, {2, 2});
  m.terms[1].b = m.terms[0].b;
  m.terms[1].c = m.terms[0].c;
  UniquenessReport rep = uniqueness_preconditions(m);
  CHECK(rep.max_b_cos >= 1.0 - 1e-12);
  CHECK(rep.max_g_cos >= 1.0 - 1e-12);
  CHECK_FALSE(rep.b_ok);
  CHECK_FALSE(rep.g_ok);
  CHECK_FALSE(rep.all_ok);
}

TEST_CASE("collinear B with distinct C keeps G healthy") {
  std::mt19937_64 rng(419);
  BtdModel m = planted_btd(rng, 8, 8, 5, 4, {2, 2});
  m.terms[1].b = -2.0 * m.terms[0].b;  // collinear after normalization
  UniquenessReport rep = uniqueness_preconditions(m);
  CHECK_FALSE(rep.b_ok);
  CHECK(rep.c_ok);
  CHECK(rep.g_ok);  // Khatri-Rao columns separate because C columns do
  CHECK(rep.max_g_cos < 1.0 - 1e-6);
  CHECK_FALSE(rep.all_ok);
}

TEST_CASE("uniqueness_preconditions detects stacked rank deficiency and null columns") {
  std::mt19937_64 rng(421);
  BtdModel m = planted_btd(rng, 4, 9, 5, 0, {2, 3});  // 5 columns in a 4-row X
  UniquenessReport rep = uniqueness_preconditions(m);
  CHECK(rep.x_cols == 5);
  CHECK(rep.x_rank <= 4);
  CHECK_FALSE(rep.x_full_rank);

  BtdModel z = planted_btd(rng, 8, 8, 5, 0, {2, 2});
  z.terms[0].b.setZero();
  CHECK_FALSE(uniqueness_preconditions(z).b_ok);
}

// ===========================================================================
// Refinement
// ===========================================================================

TEST_CASE("Gauss-Newton refinement only improves the fit") {
  std::mt19937_64 rng(431);
  BtdModel truth = planted_btd(rng, 8, 7, 9, 0, {2, 2});
  Tensor t = btd_to_tensor(truth);
  std::normal_distribution<double> g;
  const double sigma = 0.05 * frobenius_norm(t) / std::sqrt(static_cast<double>(t.size()));
  for (double& v : t.span()) v += sigma * g(rng);

  SolverOptions base;
  base.seed = 83;
  base.restarts = 1;
  base.max_iters = 8;  // stop ALS well short of convergence
  SolverOptions refined = base;
  refined.gauss_newton_refine = true;
  refined.gn_max_iters = 12;

  const double fit_plain = btd_llr1(t, {2, 2}, base).history.fits.back();
  const double fit_gn = btd_llr1(t, {2, 2}, refined).history.fits.back();
  CHECK(fit_gn >= fit_plain);
  CHECK(fit_gn > fit_plain + 1e-9);

  // The refined history is still monotone.
  BtdResult res = btd_llr1(t, {2, 2}, refined);
  for (std::size_t i = 1; i < res.history.fits.size(); ++i)
    CHECK(res.history.fits[i] >= res.history.fits[i - 1] - 1e-10);
}

// ===========================================================================
// Folded rank-2 source: block term vs rank-1 terms
// ===========================================================================

TEST_CASE("a folded rank-2 source defeats an equal budget of rank-1 terms") {
  // Cross-shaped spatial map (one horizontal and one vertical bar): rank 2.
  const std::size_t n = 8, tlen = 20;
  Matrix cross = Matrix::Zero(n, n);
  cross.row(3).array() += 1.0;
  cross.col(4).array() += 1.0;
  Matrix blob = Matrix::Zero(n, n);
  blob.block(5, 1, 2, 2).array() = 1.0;  // rank-1 companion source

  Vector tc1(tlen), tc2(tlen);
  for (std::size_t k = 0; k < tlen; ++k) {
    tc1(static_cast<Eigen::Index>(k)) = std::sin(0.7 * static_cast<double>(k));
    tc2(static_cast<Eigen::Index>(k)) = (k % 4 < 2) ? 1.0 : -1.0;
  }

  Tensor t({n, n, tlen});
  for (std::size_t k = 0; k < tlen; ++k)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < n; ++i)
        t(i, j, k) = cross(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) *
                         tc1(static_cast<Eigen::Index>(k)) +
                     blob(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) *
                         tc2(static_cast<Eigen::Index>(k));

  SolverOptions opts;
  opts.seed = 97;
  BtdResult bres = btd_llr1(t, {2, 1}, opts);
  CpdResult cres = cpd_als(t, 2, opts);
  const double btd_res = 1.0 - bres.history.fits.back();
  const double cpd_res = 1.0 - cres.history.fits.back();
  CHECK(btd_res <= 1e-8);
  CHECK(cpd_res > btd_res + 1e-6);
}
