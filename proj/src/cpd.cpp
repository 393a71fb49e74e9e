#include "mlbss/cpd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>

#include "mlbss/kernels.hpp"
#include "mlbss/random.hpp"
#include "solve_utils.hpp"

namespace mlbss {

namespace {

// Khatri-Rao chain over all factors except `skip`, higher modes outermost, so
// columns line up with the mode-`skip` unfolding's column order.
Matrix kr_chain_excluding(const std::vector<Matrix>& factors, std::size_t skip) {
  Matrix acc;
  bool first = true;
  for (std::size_t k = factors.size(); k-- > 0;) {
    if (k == skip) continue;
    if (first) {
      acc = factors[k];
      first = false;
    } else {
      acc = khatri_rao(acc, factors[k]);
    }
  }
  return acc;
}

Matrix gram_product_excluding(const std::vector<Matrix>& factors, std::size_t skip) {
  const Eigen::Index r = factors.front().cols();
  Matrix v = Matrix::Ones(r, r);
  for (std::size_t k = 0; k < factors.size(); ++k) {
    if (k == skip) continue;
    v = v.cwiseProduct((factors[k].transpose() * factors[k]).eval());
  }
  return v;
}

struct SingleRun {
  KruskalModel model;
  FitHistory history;
  bool ok = false;
  std::string failure;
};

SingleRun run_restart(const Tensor& t, const std::vector<Matrix>& unfoldings, std::size_t rank,
                      const SolverOptions& opts, int restart, double norm_t) {
  SingleRun out;
  out.history.restart_index = restart;
  std::mt19937_64 rng = seeded_rng(opts.seed, static_cast<std::uint64_t>(restart));

  const std::size_t order = t.order();
  std::vector<Matrix> factors(order);
  for (std::size_t n = 0; n < order; ++n)
    factors[n] = detail::gaussian_matrix(rng, static_cast<Eigen::Index>(t.dim(n)),
                                         static_cast<Eigen::Index>(rank));
  Vector lambda = Vector::Ones(static_cast<Eigen::Index>(rank));

  Tensor recon(t.shape());
  bool warned_pinv = false;
  double prev_fit = -std::numeric_limits<double>::infinity();

  for (int iter = 0; iter < opts.max_iters; ++iter) {
    for (std::size_t n = 0; n < order; ++n) {
      const Matrix kr = kr_chain_excluding(factors, n);
      const Matrix v = gram_product_excluding(factors, n);
      bool used_pinv = false;
      Matrix a = detail::solve_gram(v, unfoldings[n] * kr, &used_pinv);
      if (used_pinv && !warned_pinv) {
        warned_pinv = true;
        std::ostringstream msg;
        msg << "restart " << restart << ": ill-conditioned normal equations in mode " << n
            << "; pseudo-inverse applied";
        out.history.warnings.push_back(msg.str());
      }
      // Re-split scale: unit columns, magnitudes in lambda.
      for (std::size_t r = 0; r < rank; ++r) {
        const Eigen::Index rc = static_cast<Eigen::Index>(r);
        const double norm = a.col(rc).norm();
        lambda(rc) = norm;
        if (norm > 0.0) a.col(rc) /= norm;
      }
      factors[n] = std::move(a);
    }

    kernels::kruskal_full(factors, lambda, recon);
    double err2 = 0.0;
    {
      const double* pt = t.data();
      const double* pr = recon.data();
      std::vector<double> diff(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) diff[i] = pt[i] - pr[i];
      err2 = kernels::sum_squares(diff);
    }
    const double fit = 1.0 - std::sqrt(err2) / norm_t;
    if (!std::isfinite(fit)) {
      out.failure = "non-finite fit at sweep " + std::to_string(iter);
      return out;
    }
    out.history.fits.push_back(fit);
    if (iter > 0 && std::abs(fit - prev_fit) < opts.tol) {
      out.history.converged = true;
      break;
    }
    prev_fit = fit;
  }

  for (const Matrix& f : factors)
    if (!f.allFinite()) {
      out.failure = "non-finite factor";
      return out;
    }
  out.model.factors = std::move(factors);
  out.model.lambda = std::move(lambda);
  out.ok = true;
  return out;
}

}  // namespace

Tensor kruskal_to_tensor(const KruskalModel& m) { return kruskal_to_tensor(m.factors, m.lambda); }

CpdResult cpd_als(const Tensor& t, std::size_t rank, const SolverOptions& opts) {
  if (t.order() < 3) throw ArgumentError("cpd_als: tensor must be at least 3-way");
  if (rank < 1) throw ArgumentError("cpd_als: rank must be positive");
  for (std::size_t n = 0; n < t.order(); ++n)
    if (rank > t.size() / t.dim(n))
      throw ArgumentError("cpd_als: rank exceeds the mode-" + std::to_string(n) +
                          " unfolding's column count");
  if (opts.max_iters < 1 || opts.restarts < 1 || !(opts.tol > 0.0))
    throw ArgumentError("cpd_als: invalid solver options");

  const double norm_t = frobenius_norm(t);
  if (norm_t == 0.0) throw ArgumentError("cpd_als: zero tensor");

  std::vector<Matrix> unfoldings;
  unfoldings.reserve(t.order());
  for (std::size_t n = 0; n < t.order(); ++n) unfoldings.push_back(unfold(t, n));

  std::optional<SingleRun> best;
  std::vector<std::string> failures;
  for (int r = 0; r < opts.restarts; ++r) {
    SingleRun run = run_restart(t, unfoldings, rank, opts, r, norm_t);
    if (!run.ok) {
      failures.push_back("restart " + std::to_string(r) + ": " + run.failure);
      continue;
    }
    // Strictly-better keeps the lowest restart index on ties.
    if (!best || run.history.fits.back() > best->history.fits.back()) best = std::move(run);
  }
  if (!best) {
    std::ostringstream msg;
    msg << "cpd_als: all " << opts.restarts << " restarts failed:";
    for (const auto& f : failures) msg << "\n  " << f;
    throw NumericalError(msg.str());
  }
  return CpdResult{std::move(best->model), std::move(best->history)};
}

KruskalConditionReport kruskal_condition(const KruskalModel& m) {
  if (m.order() != 3) throw ArgumentError("kruskal_condition: model must be 3-way");
  const std::size_t rank = m.rank();
  if (rank == 0) throw ArgumentError("kruskal_condition: empty model");
  if (rank > 16) throw ArgumentError("kruskal_condition: exhaustive check capped at rank 16");

  KruskalConditionReport rep;
  rep.rank = rank;
  for (const Matrix& f : m.factors) {
    // Largest k such that every k-column subset has full rank (SVD ranks, so
    // near-collinear columns reduce the answer at the 1e-10 tolerance).
    std::size_t krank = 0;
    for (std::size_t k = 1; k <= rank; ++k) {
      bool all_full = true;
      std::vector<std::size_t> pick;
      // Enumerate k-subsets by bitmask; rank is small by the guard above.
      for (unsigned long mask = 0; mask < (1ul << rank) && all_full; ++mask) {
        if (static_cast<std::size_t>(__builtin_popcountl(mask)) != k) continue;
        Matrix sub(f.rows(), static_cast<Eigen::Index>(k));
        Eigen::Index at = 0;
        for (std::size_t c = 0; c < rank; ++c)
          if (mask & (1ul << c)) sub.col(at++) = f.col(static_cast<Eigen::Index>(c));
        if (detail::svd_rank(sub, 1e-10) < k) all_full = false;
      }
      if (all_full)
        krank = k;
      else
        break;
    }
    rep.k_ranks.push_back(krank);
  }
  const std::size_t total = rep.k_ranks[0] + rep.k_ranks[1] + rep.k_ranks[2];
  rep.holds = total >= 2 * rank + 2;
  return rep;
}

namespace {

// t x_mode m (mode product): folds m * unfold(t, mode) back at `mode`.
Tensor mode_multiply(const Tensor& t, const Matrix& m, std::size_t mode) {
  std::vector<std::size_t> shape = t.shape();
  shape[mode] = static_cast<std::size_t>(m.rows());
  return fold(m * unfold(t, mode), mode, shape);
}

}  // namespace

double corcondia(const Tensor& t, const KruskalModel& m, bool* used_pinv) {
  if (t.order() != 3 || m.order() != 3)
    throw ArgumentError("corcondia: tensor and model must be 3-way");
  const std::size_t rank = m.rank();
  if (rank == 0) throw ArgumentError("corcondia: empty model");
  for (std::size_t n = 0; n < 3; ++n)
    if (static_cast<std::size_t>(m.factors[n].rows()) != t.dim(n))
      throw ArgumentError("corcondia: model/tensor shape mismatch");
  if (used_pinv) *used_pinv = false;
  // One component has no off-superdiagonal entries and its single core value
  // rescales into the model, so consistency is perfect by construction.
  if (rank == 1) return 100.0;

  // Least-squares Tucker core under the model's factors (scales absorbed into
  // the first mode so the ideal core is the unit superdiagonal).
  bool deficient = false;
  Matrix a = m.factors[0] * m.lambda.asDiagonal();
  Tensor g = mode_multiply(t, detail::pinv(a, &deficient), 0);
  g = mode_multiply(g, detail::pinv(m.factors[1], &deficient), 1);
  g = mode_multiply(g, detail::pinv(m.factors[2], &deficient), 2);
  if (used_pinv) *used_pinv = deficient;

  double ss = 0.0;
  for (std::size_t i = 0; i < rank; ++i)
    for (std::size_t j = 0; j < rank; ++j)
      for (std::size_t k = 0; k < rank; ++k) {
        const double delta = (i == j && j == k) ? 1.0 : 0.0;
        const double d = g(i, j, k) - delta;
        ss += d * d;
      }
  return 100.0 * (1.0 - ss / static_cast<double>(rank));
}

std::size_t estimate_rank(const Tensor& t, std::size_t r_max, const SolverOptions& opts,
                          std::vector<double>* scores_out) {
  if (r_max < 2) throw ArgumentError("estimate_rank: r_max must be at least 2");
  std::vector<double> scores;
  for (std::size_t r = 1; r <= r_max; ++r) {
    CpdResult fit = cpd_als(t, r, opts);
    scores.push_back(corcondia(t, fit.model));
  }
  if (scores_out) *scores_out = scores;

  // Corner of the score curve: the rank furthest above the chord joining the
  // endpoints, with scores clamped to [0,100] so collapsed scores (corcondia
  // is unbounded below) cannot dominate the geometry.
  std::vector<double> s(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) s[i] = std::clamp(scores[i], 0.0, 100.0);
  const double span = *std::max_element(s.begin(), s.end()) - *std::min_element(s.begin(), s.end());
  if (span < 1e-9) return 1;  // flat curve: no evidence beyond one component

  const double x0 = 1.0, x1 = static_cast<double>(r_max);
  const double y0 = s.front(), y1 = s.back();
  const double dx = x1 - x0, dy = y1 - y0;
  const double seg = std::sqrt(dx * dx + dy * dy);
  std::size_t best_r = 1;
  double best_d = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double x = static_cast<double>(i + 1);
    // Signed perpendicular distance; positive above the chord.
    const double d = (dx * (s[i] - y0) - dy * (x - x0)) / seg;
    if (d > best_d + 1e-12) {
      best_d = d;
      best_r = i + 1;
    }
  }
  return best_r;
}

}  // namespace mlbss
