#include "mlbss/btd.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>

#include <Eigen/Dense>

#include "mlbss/errors.hpp"
#include "mlbss/kernels.hpp"
#include "mlbss/random.hpp"
#include "solve_utils.hpp"

namespace mlbss {

namespace {

// A term whose slab norm falls below this fraction of |T| is re-seeded once,
// then reported as empty.
constexpr double kDegenerateRel = 1e-12;
// Two columns count as collinear when |cos| exceeds this.
constexpr double kCollinearCos = 1.0 - 1e-6;
// Gauss-Newton refinement is skipped above this parameter count.
constexpr std::size_t kMaxRefineParams = 2000;

// Mutable factor state during alternating sweeps. Empty terms keep their
// (zeroed) storage but are excluded from the joint least-squares systems.
struct Workspace {
  std::vector<Matrix> X, Y;
  Matrix B;  // I3 x R
  Matrix C;  // I4 x R; 0x0 in the 3-way case
  std::vector<std::size_t> L;
  std::vector<bool> empty;
  std::vector<bool> reseeded;

  bool four_way() const { return C.size() > 0; }
  std::vector<std::size_t> active() const {
    std::vector<std::size_t> idx;
    for (std::size_t r = 0; r < L.size(); ++r)
      if (!empty[r]) idx.push_back(r);
    return idx;
  }
};

void seed_term(Workspace& ws, std::size_t r, std::mt19937_64& rng, Eigen::Index i1,
               Eigen::Index i2) {
  const auto l = static_cast<Eigen::Index>(ws.L[r]);
  ws.X[r] = detail::gaussian_matrix(rng, i1, l);
  ws.Y[r] = detail::gaussian_matrix(rng, i2, l);
  ws.B.col(static_cast<Eigen::Index>(r)) =
      detail::gaussian_matrix(rng, ws.B.rows(), 1).normalized();
  if (ws.four_way())
    ws.C.col(static_cast<Eigen::Index>(r)) =
        detail::gaussian_matrix(rng, ws.C.rows(), 1).normalized();
}

// Unit-norm b (and c), scale absorbed into X; X and Y balanced to equal
// Frobenius norm. Leaves the reconstruction unchanged.
void normalize_terms(Workspace& ws) {
  for (std::size_t r : ws.active()) {
    const auto rc = static_cast<Eigen::Index>(r);
    const double nb = ws.B.col(rc).norm();
    if (nb > 0.0) {
      ws.B.col(rc) /= nb;
      ws.X[r] *= nb;
    }
    if (ws.four_way()) {
      const double nc = ws.C.col(rc).norm();
      if (nc > 0.0) {
        ws.C.col(rc) /= nc;
        ws.X[r] *= nc;
      }
    }
    const double sx = ws.X[r].norm(), sy = ws.Y[r].norm();
    if (sx > 0.0 && sy > 0.0) {
      const double s = std::sqrt(sy / sx);
      ws.X[r] *= s;
      ws.Y[r] /= s;
    }
  }
}

// Eigendecomposing a Gram larger than this for the data-driven start would
// cost more than it saves; such problems keep the random start.
constexpr Eigen::Index kMaxSeedGramDim = 2048;

// Data-driven start used for the first restart only. The leading eigenvectors
// of the mode-3 Gram t2*t2' give candidate third-mode directions; each one
// back-projects to an I1 x I2 slab whose thin SVD seeds (X_r, Y_r). When the
// data is close to a low block-term model this lands inside the right
// subspace, which a random start often misses when the third-mode directions
// are nearly collinear. Returns false (leaving the random seed in place) when
// the problem is too large or the decomposition is unusable.
bool seed_from_subspace3(const Matrix& t2, Workspace& ws, Eigen::Index i1, Eigen::Index i2) {
  const Eigen::Index i3 = t2.rows();
  const auto nr = static_cast<Eigen::Index>(ws.L.size());
  if (i3 > kMaxSeedGramDim || nr > i3) return false;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(t2 * t2.transpose());
  if (eig.info() != Eigen::Success) return false;
  for (Eigen::Index k = 0; k < nr; ++k) {
    const Vector b = eig.eigenvectors().col(i3 - 1 - k);  // eigenvalues ascend
    if (!b.allFinite()) return false;
    const Eigen::RowVectorXd wrow = b.transpose() * t2;
    const Eigen::Map<const Matrix> w(wrow.data(), i1, i2);
    Eigen::JacobiSVD<Matrix> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto lk = static_cast<Eigen::Index>(ws.L[static_cast<std::size_t>(k)]);
    const double s1 = svd.singularValues()(0);
    if (!(s1 > 0.0) || svd.singularValues().size() < lk) return false;
    // Floor keeps rank-deficient slabs from planting exactly-zero columns.
    const Vector scale =
        svd.singularValues().head(lk).cwiseMax(s1 * 1e-12).cwiseSqrt();
    ws.X[static_cast<std::size_t>(k)] = svd.matrixU().leftCols(lk) * scale.asDiagonal();
    ws.Y[static_cast<std::size_t>(k)] = svd.matrixV().leftCols(lk) * scale.asDiagonal();
    ws.B.col(k) = b;
  }
  return true;
}

// Four-way analogue: leading eigenvectors of z'z (z the joint mode-(3,4)
// unfolding) are split into b (x) c by a rank-1 SVD of their I3 x I4 reshape,
// and the back-projected slab seeds (X_r, Y_r) as above.
bool seed_from_subspace4(const Eigen::Map<const Matrix>& z, Workspace& ws, Eigen::Index i1,
                         Eigen::Index i2, Eigen::Index i3, Eigen::Index i4) {
  const Eigen::Index m = i3 * i4;
  const auto nr = static_cast<Eigen::Index>(ws.L.size());
  if (m > kMaxSeedGramDim || nr > m) return false;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(z.transpose() * z);
  if (eig.info() != Eigen::Success) return false;
  for (Eigen::Index k = 0; k < nr; ++k) {
    const Vector g = eig.eigenvectors().col(m - 1 - k);
    if (!g.allFinite()) return false;
    const Eigen::Map<const Matrix> gm(g.data(), i3, i4);
    Eigen::JacobiSVD<Matrix> gsvd(gm, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (!(gsvd.singularValues()(0) > 0.0)) return false;
    const Vector wv = z * g;
    const Eigen::Map<const Matrix> w(wv.data(), i1, i2);
    Eigen::JacobiSVD<Matrix> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto lk = static_cast<Eigen::Index>(ws.L[static_cast<std::size_t>(k)]);
    const double s1 = svd.singularValues()(0);
    if (!(s1 > 0.0) || svd.singularValues().size() < lk) return false;
    const Vector scale =
        svd.singularValues().head(lk).cwiseMax(s1 * 1e-12).cwiseSqrt();
    ws.X[static_cast<std::size_t>(k)] = svd.matrixU().leftCols(lk) * scale.asDiagonal();
    ws.Y[static_cast<std::size_t>(k)] = svd.matrixV().leftCols(lk) * scale.asDiagonal();
    ws.B.col(k) = gsvd.matrixU().col(0);
    ws.C.col(k) = gsvd.matrixV().col(0);
  }
  return true;
}

// Collapsed-term policy: one random re-seed, then the term is emptied.
// Runs before a sweep so the following exact LS pass absorbs the change.
void handle_degenerate_terms(Workspace& ws, double t_norm, std::mt19937_64& rng,
                             std::vector<std::string>& warnings) {
  for (std::size_t r : ws.active()) {
    const auto rc = static_cast<Eigen::Index>(r);
    double tn = (ws.X[r] * ws.Y[r].transpose()).norm() * ws.B.col(rc).norm();
    if (ws.four_way()) tn *= ws.C.col(rc).norm();
    if (tn >= kDegenerateRel * t_norm) continue;
    if (!ws.reseeded[r]) {
      ws.reseeded[r] = true;
      seed_term(ws, r, rng, ws.X[r].rows(), ws.Y[r].rows());
      warnings.push_back("term " + std::to_string(r) + " collapsed and was re-seeded");
    } else {
      ws.empty[r] = true;
      ws.X[r].setZero();
      ws.Y[r].setZero();
      ws.B.col(rc).setZero();
      if (ws.four_way()) ws.C.col(rc).setZero();
      warnings.push_back("term " + std::to_string(r) + " collapsed twice and was emptied");
    }
  }
}

Tensor reconstruct(const Workspace& ws, const std::vector<std::size_t>& shape) {
  std::vector<Matrix> slabs(ws.L.size());
  for (std::size_t r = 0; r < ws.L.size(); ++r) slabs[r] = ws.X[r] * ws.Y[r].transpose();
  Tensor out(shape);
  kernels::lowrank_outer_full(slabs, ws.B, ws.four_way() ? &ws.C : nullptr, out);
  return out;
}

double rel_residual(const Tensor& t, const Workspace& ws, double t_norm) {
  Tensor recon = reconstruct(ws, t.shape());
  auto rs = recon.span();
  const auto ts = t.span();
  for (std::size_t i = 0; i < rs.size(); ++i) rs[i] -= ts[i];
  return std::sqrt(kernels::sum_squares(rs)) / t_norm;
}

std::vector<Eigen::Index> column_offsets(const Workspace& ws,
                                         const std::vector<std::size_t>& act) {
  std::vector<Eigen::Index> off(act.size() + 1, 0);
  for (std::size_t a = 0; a < act.size(); ++a)
    off[a + 1] = off[a] + static_cast<Eigen::Index>(ws.L[act[a]]);
  return off;
}

// One exact-LS pass over {X}, {Y}, B (3-way). Returns false on non-finite
// updates.
bool sweep3(const Matrix& t2, Workspace& ws, Eigen::Index i1, Eigen::Index i2,
            bool& used_pinv) {
  const auto act = ws.active();
  if (act.empty()) return true;
  const auto off = column_offsets(ws, act);
  const Eigen::Index p = off.back();
  const auto ra = static_cast<Eigen::Index>(act.size());

  // Contracted slabs W_r = sum_k b_r(k) T(:,:,k); reused by the X and Y steps.
  std::vector<Matrix> w(act.size());
  for (std::size_t a = 0; a < act.size(); ++a) {
    Eigen::RowVectorXd v = ws.B.col(static_cast<Eigen::Index>(act[a])).transpose() * t2;
    w[a] = Eigen::Map<const Matrix>(v.data(), i1, i2);
  }

  Matrix m(i1, p), g(p, p);
  for (std::size_t a = 0; a < act.size(); ++a) {
    m.middleCols(off[a], off[a + 1] - off[a]) = w[a] * ws.Y[act[a]];
    for (std::size_t s = 0; s < act.size(); ++s) {
      const double bb = ws.B.col(static_cast<Eigen::Index>(act[a]))
                            .dot(ws.B.col(static_cast<Eigen::Index>(act[s])));
      g.block(off[a], off[s], off[a + 1] - off[a], off[s + 1] - off[s]) =
          bb * (ws.Y[act[a]].transpose() * ws.Y[act[s]]);
    }
  }
  Matrix xj = detail::solve_gram(g, m, &used_pinv);
  if (!xj.allFinite()) return false;
  for (std::size_t a = 0; a < act.size(); ++a)
    ws.X[act[a]] = xj.middleCols(off[a], off[a + 1] - off[a]);

  Matrix my(i2, p);
  for (std::size_t a = 0; a < act.size(); ++a) {
    my.middleCols(off[a], off[a + 1] - off[a]) = w[a].transpose() * ws.X[act[a]];
    for (std::size_t s = 0; s < act.size(); ++s) {
      const double bb = ws.B.col(static_cast<Eigen::Index>(act[a]))
                            .dot(ws.B.col(static_cast<Eigen::Index>(act[s])));
      g.block(off[a], off[s], off[a + 1] - off[a], off[s + 1] - off[s]) =
          bb * (ws.X[act[a]].transpose() * ws.X[act[s]]);
    }
  }
  Matrix yj = detail::solve_gram(g, my, &used_pinv);
  if (!yj.allFinite()) return false;
  for (std::size_t a = 0; a < act.size(); ++a)
    ws.Y[act[a]] = yj.middleCols(off[a], off[a + 1] - off[a]);

  Matrix f(i1 * i2, ra);
  for (std::size_t a = 0; a < act.size(); ++a) {
    Matrix slab = ws.X[act[a]] * ws.Y[act[a]].transpose();
    f.col(static_cast<Eigen::Index>(a)) = Eigen::Map<const Vector>(slab.data(), i1 * i2);
  }
  Matrix mb = t2 * f;
  Matrix gb(ra, ra);
  for (std::size_t a = 0; a < act.size(); ++a)
    for (std::size_t s = 0; s < act.size(); ++s)
      gb(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(s)) =
          ((ws.X[act[a]].transpose() * ws.X[act[s]])
               .cwiseProduct(ws.Y[act[a]].transpose() * ws.Y[act[s]]))
              .sum();
  Matrix bact = detail::solve_gram(gb, mb, &used_pinv);
  if (!bact.allFinite()) return false;
  for (std::size_t a = 0; a < act.size(); ++a)
    ws.B.col(static_cast<Eigen::Index>(act[a])) = bact.col(static_cast<Eigen::Index>(a));
  return true;
}

// One exact-LS pass over {X}, {Y}, B, C (direct 4-way path). z is the tensor
// flattened to (I1*I2) x (I3*I4), which costs nothing under this layout.
bool sweep4(const Eigen::Map<const Matrix>& z, Workspace& ws, Eigen::Index i1, Eigen::Index i2,
            Eigen::Index i3, Eigen::Index i4, bool& used_pinv) {
  const auto act = ws.active();
  if (act.empty()) return true;
  const auto off = column_offsets(ws, act);
  const Eigen::Index p = off.back();
  const auto ra = static_cast<Eigen::Index>(act.size());

  std::vector<Matrix> w(act.size());
  for (std::size_t a = 0; a < act.size(); ++a) {
    const auto rc = static_cast<Eigen::Index>(act[a]);
    Vector gvec(i3 * i4);  // kron(c_r, b_r): third index fastest
    for (Eigen::Index l = 0; l < i4; ++l) gvec.segment(l * i3, i3) = ws.C(l, rc) * ws.B.col(rc);
    Vector wv = z * gvec;
    w[a] = Eigen::Map<const Matrix>(wv.data(), i1, i2);
  }

  auto scale = [&](std::size_t r, std::size_t s) {
    const auto rc = static_cast<Eigen::Index>(r), sc = static_cast<Eigen::Index>(s);
    return ws.B.col(rc).dot(ws.B.col(sc)) * ws.C.col(rc).dot(ws.C.col(sc));
  };

  Matrix m(i1, p), g(p, p);
  for (std::size_t a = 0; a < act.size(); ++a) {
    m.middleCols(off[a], off[a + 1] - off[a]) = w[a] * ws.Y[act[a]];
    for (std::size_t s = 0; s < act.size(); ++s)
      g.block(off[a], off[s], off[a + 1] - off[a], off[s + 1] - off[s]) =
          scale(act[a], act[s]) * (ws.Y[act[a]].transpose() * ws.Y[act[s]]);
  }
  Matrix xj = detail::solve_gram(g, m, &used_pinv);
  if (!xj.allFinite()) return false;
  for (std::size_t a = 0; a < act.size(); ++a)
    ws.X[act[a]] = xj.middleCols(off[a], off[a + 1] - off[a]);

  Matrix my(i2, p);
  for (std::size_t a = 0; a < act.size(); ++a) {
    my.middleCols(off[a], off[a + 1] - off[a]) = w[a].transpose() * ws.X[act[a]];
    for (std::size_t s = 0; s < act.size(); ++s)
      g.block(off[a], off[s], off[a + 1] - off[a], off[s + 1] - off[s]) =
          scale(act[a], act[s]) * (ws.X[act[a]].transpose() * ws.X[act[s]]);
  }
  Matrix yj = detail::solve_gram(g, my, &used_pinv);
  if (!yj.allFinite()) return false;
  for (std::size_t a = 0; a < act.size(); ++a)
    ws.Y[act[a]] = yj.middleCols(off[a], off[a + 1] - off[a]);

  // Slab inner products and slab-contracted data, shared by the B and C steps.
  std::vector<Matrix> h(act.size());
  Matrix fgram(ra, ra);
  for (std::size_t a = 0; a < act.size(); ++a) {
    Matrix slab = ws.X[act[a]] * ws.Y[act[a]].transpose();
    Vector hv = z.transpose() * Eigen::Map<const Vector>(slab.data(), i1 * i2);
    h[a] = Eigen::Map<const Matrix>(hv.data(), i3, i4);
    for (std::size_t s = 0; s <= a; ++s) {
      fgram(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(s)) =
          ((ws.X[act[a]].transpose() * ws.X[act[s]])
               .cwiseProduct(ws.Y[act[a]].transpose() * ws.Y[act[s]]))
              .sum();
      fgram(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) =
          fgram(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(s));
    }
  }

  Matrix mb(i3, ra), gb(ra, ra);
  for (std::size_t a = 0; a < act.size(); ++a) {
    mb.col(static_cast<Eigen::Index>(a)) = h[a] * ws.C.col(static_cast<Eigen::Index>(act[a]));
    for (std::size_t s = 0; s < act.size(); ++s)
      gb(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(s)) =
          fgram(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(s)) *
          ws.C.col(static_cast<Eigen::Index>(act[a]))
              .dot(ws.C.col(static_cast<Eigen::Index>(act[s])));
  }
  Matrix bact = detail::solve_gram(gb, mb, &used_pinv);
  if (!bact.allFinite()) return false;
  for (std::size_t a = 0; a < act.size(); ++a)
    ws.B.col(static_cast<Eigen::Index>(act[a])) = bact.col(static_cast<Eigen::Index>(a));

  Matrix mc(i4, ra), gc(ra, ra);
  for (std::size_t a = 0; a < act.size(); ++a) {
    mc.col(static_cast<Eigen::Index>(a)) =
        h[a].transpose() * ws.B.col(static_cast<Eigen::Index>(act[a]));
    for (std::size_t s = 0; s < act.size(); ++s)
      gc(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(s)) =
          fgram(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(s)) *
          ws.B.col(static_cast<Eigen::Index>(act[a]))
              .dot(ws.B.col(static_cast<Eigen::Index>(act[s])));
  }
  Matrix cact = detail::solve_gram(gc, mc, &used_pinv);
  if (!cact.allFinite()) return false;
  for (std::size_t a = 0; a < act.size(); ++a)
    ws.C.col(static_cast<Eigen::Index>(act[a])) = cact.col(static_cast<Eigen::Index>(a));
  return true;
}

struct RestartOutcome {
  Workspace ws;
  std::vector<double> fits;
  std::vector<std::string> warnings;
  bool converged = false;
  bool failed = false;
  std::string fail_reason;
  double final_rel = std::numeric_limits<double>::infinity();
};

RestartOutcome run_restart(const Tensor& t, const std::vector<std::size_t>& ranks,
                           const SolverOptions& opts, int restart, double t_norm,
                           const Matrix* t2) {
  const auto& shape = t.shape();
  const auto i1 = static_cast<Eigen::Index>(shape[0]);
  const auto i2 = static_cast<Eigen::Index>(shape[1]);
  const bool four_way = shape.size() == 4;

  RestartOutcome out;
  Workspace& ws = out.ws;
  ws.L = ranks;
  ws.X.resize(ranks.size());
  ws.Y.resize(ranks.size());
  ws.B = Matrix::Zero(static_cast<Eigen::Index>(shape[2]), static_cast<Eigen::Index>(ranks.size()));
  if (four_way)
    ws.C = Matrix::Zero(static_cast<Eigen::Index>(shape[3]),
                        static_cast<Eigen::Index>(ranks.size()));
  ws.empty.assign(ranks.size(), false);
  ws.reseeded.assign(ranks.size(), false);

  std::mt19937_64 rng = seeded_rng(opts.seed, static_cast<std::uint64_t>(restart));
  for (std::size_t r = 0; r < ranks.size(); ++r) seed_term(ws, r, rng, i1, i2);

  std::optional<Eigen::Map<const Matrix>> z;
  if (four_way)
    z.emplace(t.data(), i1 * i2,
              static_cast<Eigen::Index>(shape[2]) * static_cast<Eigen::Index>(shape[3]));

  // First restart starts from the data's own dominant subspace; the rest stay
  // random so the multistart still explores distinct basins.
  if (restart == 0) {
    if (four_way)
      seed_from_subspace4(*z, ws, i1, i2, static_cast<Eigen::Index>(shape[2]),
                          static_cast<Eigen::Index>(shape[3]));
    else
      seed_from_subspace3(*t2, ws, i1, i2);
  }
  normalize_terms(ws);

  bool used_pinv = false;
  double prev_fit = 0.0;
  for (int iter = 0; iter < opts.max_iters; ++iter) {
    handle_degenerate_terms(ws, t_norm, rng, out.warnings);
    const bool ok = four_way ? sweep4(*z, ws, i1, i2, static_cast<Eigen::Index>(shape[2]),
                                      static_cast<Eigen::Index>(shape[3]), used_pinv)
                             : sweep3(*t2, ws, i1, i2, used_pinv);
    if (!ok) {
      out.failed = true;
      out.fail_reason = "non-finite factor update";
      return out;
    }
    normalize_terms(ws);
    const double rel = rel_residual(t, ws, t_norm);
    if (!std::isfinite(rel)) {
      out.failed = true;
      out.fail_reason = "non-finite residual";
      return out;
    }
    const double fit = 1.0 - rel;
    out.fits.push_back(fit);
    if (iter > 0 && std::abs(fit - prev_fit) < opts.tol) {
      out.converged = true;
      break;
    }
    prev_fit = fit;
  }
  out.final_rel = 1.0 - out.fits.back();
  if (used_pinv)
    out.warnings.push_back("singular subproblem encountered; pseudo-inverse used");
  return out;
}

// ---------------------------------------------------------------------------
// Damped Gauss-Newton refinement (3-way). Normal equations are assembled from
// factor Grams; the Jacobian is never formed. Only improving steps are taken.
// ---------------------------------------------------------------------------

void lm_refine(const Tensor& t, Workspace& ws, std::vector<double>& fits,
               std::vector<std::string>& warnings, const SolverOptions& opts, double t_norm) {
  const auto act = ws.active();
  if (act.empty() || opts.gn_max_iters < 1) return;
  const auto& shape = t.shape();
  const auto i1 = static_cast<Eigen::Index>(shape[0]);
  const auto i2 = static_cast<Eigen::Index>(shape[1]);
  const auto i3 = static_cast<Eigen::Index>(shape[2]);

  std::vector<Eigen::Index> lr(act.size());
  Eigen::Index p = 0;
  std::vector<Eigen::Index> offx(act.size()), offy(act.size()), offb(act.size());
  for (std::size_t a = 0; a < act.size(); ++a) lr[a] = static_cast<Eigen::Index>(ws.L[act[a]]);
  for (std::size_t a = 0; a < act.size(); ++a) {
    offx[a] = p;
    p += i1 * lr[a];
  }
  for (std::size_t a = 0; a < act.size(); ++a) {
    offy[a] = p;
    p += i2 * lr[a];
  }
  for (std::size_t a = 0; a < act.size(); ++a) {
    offb[a] = p;
    p += i3;
  }
  if (static_cast<std::size_t>(p) > kMaxRefineParams) {
    warnings.push_back("refinement skipped: " + std::to_string(p) + " parameters exceed " +
                       std::to_string(kMaxRefineParams));
    return;
  }

  auto objective = [&](const Workspace& w, Tensor* res_out) {
    Tensor res = reconstruct(w, shape);
    auto rs = res.span();
    const auto ts = t.span();
    for (std::size_t i = 0; i < rs.size(); ++i) rs[i] -= ts[i];
    const double f = 0.5 * kernels::sum_squares(res.span());
    if (res_out) *res_out = std::move(res);
    return f;
  };

  Tensor res({1});
  double f = objective(ws, &res);
  double mu = -1.0;
  for (int iter = 0; iter < opts.gn_max_iters; ++iter) {
    const Matrix res2 = unfold(res, 2);  // I3 x (I1*I2)

    Vector grad = Vector::Zero(p);
    Matrix h = Matrix::Zero(p, p);
    std::vector<Matrix> wres(act.size());
    for (std::size_t a = 0; a < act.size(); ++a) {
      Eigen::RowVectorXd v = ws.B.col(static_cast<Eigen::Index>(act[a])).transpose() * res2;
      wres[a] = Eigen::Map<const Matrix>(v.data(), i1, i2);
      Matrix gx = wres[a] * ws.Y[act[a]];
      grad.segment(offx[a], i1 * lr[a]) = Eigen::Map<const Vector>(gx.data(), i1 * lr[a]);
      Matrix gy = wres[a].transpose() * ws.X[act[a]];
      grad.segment(offy[a], i2 * lr[a]) = Eigen::Map<const Vector>(gy.data(), i2 * lr[a]);
      Matrix slab = ws.X[act[a]] * ws.Y[act[a]].transpose();
      grad.segment(offb[a], i3) = res2 * Eigen::Map<const Vector>(slab.data(), i1 * i2);
    }

    for (std::size_t a = 0; a < act.size(); ++a) {
      const auto r = act[a];
      const auto rc = static_cast<Eigen::Index>(r);
      for (std::size_t s = 0; s < act.size(); ++s) {
        const auto q = act[s];
        const auto qc = static_cast<Eigen::Index>(q);
        const double bb = ws.B.col(rc).dot(ws.B.col(qc));
        const Matrix yy = ws.Y[r].transpose() * ws.Y[q];
        const Matrix xx = ws.X[r].transpose() * ws.X[q];
        // X_r x X_s and Y_r x Y_s: Gram entries on scaled identity blocks.
        for (Eigen::Index mr = 0; mr < lr[a]; ++mr)
          for (Eigen::Index ms = 0; ms < lr[s]; ++ms) {
            h.block(offx[a] + mr * i1, offx[s] + ms * i1, i1, i1).diagonal().array() +=
                bb * yy(mr, ms);
            h.block(offy[a] + mr * i2, offy[s] + ms * i2, i2, i2).diagonal().array() +=
                bb * xx(mr, ms);
          }
        // X_r x Y_s: rank-one pattern per column pair.
        for (Eigen::Index mr = 0; mr < lr[a]; ++mr)
          for (Eigen::Index ms = 0; ms < lr[s]; ++ms) {
            Matrix blk = bb * (ws.X[q].col(ms) * ws.Y[r].col(mr).transpose());
            h.block(offx[a] + mr * i1, offy[s] + ms * i2, i1, i2) += blk;
            h.block(offy[s] + ms * i2, offx[a] + mr * i1, i2, i1) += blk.transpose();
          }
        // X_r x b_s and Y_r x b_s.
        Matrix xyb = ws.X[q] * (ws.Y[q].transpose() * ws.Y[r]);  // I1 x L_r
        Matrix yxb = ws.Y[q] * (ws.X[q].transpose() * ws.X[r]);  // I2 x L_r
        h.block(offx[a], offb[s], i1 * lr[a], i3) +=
            Eigen::Map<const Vector>(xyb.data(), i1 * lr[a]) * ws.B.col(rc).transpose();
        h.block(offb[s], offx[a], i3, i1 * lr[a]) +=
            ws.B.col(rc) * Eigen::Map<const Vector>(xyb.data(), i1 * lr[a]).transpose();
        h.block(offy[a], offb[s], i2 * lr[a], i3) +=
            Eigen::Map<const Vector>(yxb.data(), i2 * lr[a]) * ws.B.col(rc).transpose();
        h.block(offb[s], offy[a], i3, i2 * lr[a]) +=
            ws.B.col(rc) * Eigen::Map<const Vector>(yxb.data(), i2 * lr[a]).transpose();
        // b_r x b_s.
        h.block(offb[a], offb[s], i3, i3).diagonal().array() += (xx.cwiseProduct(yy)).sum();
      }
    }

    if (mu < 0.0) mu = 1e-3 * h.diagonal().maxCoeff();
    bool accepted = false;
    for (int tries = 0; tries < 20 && !accepted; ++tries) {
      Matrix hd = h;
      hd.diagonal().array() += mu;
      Vector delta = hd.ldlt().solve(-grad);
      if (!delta.allFinite()) break;
      Workspace cand = ws;
      for (std::size_t a = 0; a < act.size(); ++a) {
        const auto r = act[a];
        cand.X[r] += Eigen::Map<const Matrix>(delta.segment(offx[a], i1 * lr[a]).data(), i1,
                                              lr[a]);
        cand.Y[r] += Eigen::Map<const Matrix>(delta.segment(offy[a], i2 * lr[a]).data(), i2,
                                              lr[a]);
        cand.B.col(static_cast<Eigen::Index>(r)) += delta.segment(offb[a], i3);
      }
      Tensor cand_res({1});
      const double fc = objective(cand, &cand_res);
      if (std::isfinite(fc) && fc < f) {
        const double gain = f - fc;
        ws = std::move(cand);
        res = std::move(cand_res);
        f = fc;
        mu = std::max(mu / 3.0, 1e-15);
        fits.push_back(1.0 - std::sqrt(2.0 * f) / t_norm);
        accepted = true;
        if (gain < opts.tol * std::max(f, 1.0)) iter = opts.gn_max_iters;  // converged
      } else {
        mu *= 4.0;
      }
    }
    if (!accepted) break;
  }
  normalize_terms(ws);
}

// Largest-magnitude entry of each b_r made positive (X_r compensates); for
// 4-way workspaces the same convention is applied to c_r.
void fix_signs(Workspace& ws) {
  for (std::size_t r : ws.active()) {
    const auto rc = static_cast<Eigen::Index>(r);
    Eigen::Index idx = 0;
    ws.B.col(rc).cwiseAbs().maxCoeff(&idx);
    if (ws.B(idx, rc) < 0.0) {
      ws.B.col(rc) = -ws.B.col(rc);
      ws.X[r] = -ws.X[r];
    }
    if (ws.four_way()) {
      ws.C.col(rc).cwiseAbs().maxCoeff(&idx);
      if (ws.C(idx, rc) < 0.0) {
        ws.C.col(rc) = -ws.C.col(rc);
        ws.X[r] = -ws.X[r];
      }
    }
  }
}

BtdModel model_from_workspace(const Workspace& ws) {
  BtdModel m;
  for (std::size_t r = 0; r < ws.L.size(); ++r) {
    BtdTerm term;
    term.X = ws.X[r];
    term.Y = ws.Y[r];
    term.b = ws.B.col(static_cast<Eigen::Index>(r));
    if (ws.four_way()) term.c = ws.C.col(static_cast<Eigen::Index>(r));
    term.L = ws.L[r];
    term.empty = ws.empty[r];
    m.terms.push_back(std::move(term));
  }
  return m;
}

void validate_common(const Tensor& t, const std::vector<std::size_t>& ranks,
                     const SolverOptions& opts, std::size_t order, const char* who) {
  std::ostringstream msg;
  msg << who << ": ";
  if (t.order() != order) {
    msg << "expected a " << order << "-way tensor, got order " << t.order();
    throw ArgumentError(msg.str());
  }
  if (ranks.empty()) {
    msg << "at least one term rank is required";
    throw ArgumentError(msg.str());
  }
  const std::size_t cap = std::min(t.shape()[0], t.shape()[1]);
  for (std::size_t l : ranks)
    if (l < 1 || l > cap) {
      msg << "term rank " << l << " outside [1, min(I1,I2)=" << cap << "]";
      throw ArgumentError(msg.str());
    }
  if (opts.max_iters < 1 || opts.restarts < 1 || !(opts.tol > 0.0)) {
    msg << "invalid solver options";
    throw ArgumentError(msg.str());
  }
  if (frobenius_norm(t) == 0.0) {
    msg << "input tensor is identically zero";
    throw ArgumentError(msg.str());
  }
}

RestartOutcome best_of_restarts(const Tensor& t, const std::vector<std::size_t>& ranks,
                                const SolverOptions& opts, double t_norm, const Matrix* t2,
                                int* best_index, const char* who) {
  RestartOutcome best;
  std::vector<std::string> failures;
  *best_index = -1;
  for (int r = 0; r < opts.restarts; ++r) {
    RestartOutcome out = run_restart(t, ranks, opts, r, t_norm, t2);
    if (out.failed) {
      failures.push_back("restart " + std::to_string(r) + ": " + out.fail_reason);
      continue;
    }
    if (out.final_rel < best.final_rel) {
      best = std::move(out);
      *best_index = r;
    }
  }
  if (*best_index < 0) {
    std::ostringstream msg;
    msg << who << ": all " << opts.restarts << " restarts failed:";
    for (const auto& s : failures) msg << " [" << s << "]";
    throw NumericalError(msg.str());
  }
  return best;
}

}  // namespace

Tensor btd_to_tensor(const BtdModel& m) {
  if (m.terms.empty()) throw ArgumentError("btd_to_tensor: model has no terms");
  const auto& t0 = m.terms.front();
  const bool four_way = t0.c.size() > 0;
  std::vector<Matrix> slabs;
  Matrix b(t0.b.size(), static_cast<Eigen::Index>(m.terms.size()));
  Matrix c(four_way ? t0.c.size() : 0, four_way ? static_cast<Eigen::Index>(m.terms.size()) : 0);
  for (std::size_t r = 0; r < m.terms.size(); ++r) {
    const auto& term = m.terms[r];
    if (term.X.cols() != term.Y.cols() ||
        static_cast<std::size_t>(term.X.cols()) != term.L || term.L < 1)
      throw ArgumentError("btd_to_tensor: term " + std::to_string(r) +
                          " has inconsistent factor widths");
    if (term.X.rows() != t0.X.rows() || term.Y.rows() != t0.Y.rows() ||
        term.b.size() != t0.b.size() || term.c.size() != t0.c.size())
      throw ArgumentError("btd_to_tensor: term " + std::to_string(r) +
                          " disagrees with term 0 on tensor dimensions");
    slabs.push_back(term.X * term.Y.transpose());
    b.col(static_cast<Eigen::Index>(r)) = term.b;
    if (four_way) c.col(static_cast<Eigen::Index>(r)) = term.c;
  }
  std::vector<std::size_t> shape = {static_cast<std::size_t>(t0.X.rows()),
                                    static_cast<std::size_t>(t0.Y.rows()),
                                    static_cast<std::size_t>(t0.b.size())};
  if (four_way) shape.push_back(static_cast<std::size_t>(t0.c.size()));
  Tensor out(shape);
  kernels::lowrank_outer_full(slabs, b, four_way ? &c : nullptr, out);
  return out;
}

UniquenessReport uniqueness_preconditions(const BtdModel& m) {
  UniquenessReport rep;
  std::vector<std::size_t> act;
  for (std::size_t r = 0; r < m.terms.size(); ++r)
    if (!m.terms[r].empty) act.push_back(r);
  if (act.empty()) return rep;

  const bool four_way = m.terms[act[0]].c.size() > 0;
  Eigen::Index total_l = 0;
  for (std::size_t r : act) total_l += m.terms[r].X.cols();
  Matrix xall(m.terms[act[0]].X.rows(), total_l), yall(m.terms[act[0]].Y.rows(), total_l);
  Matrix b(m.terms[act[0]].b.size(), static_cast<Eigen::Index>(act.size()));
  Matrix c(four_way ? m.terms[act[0]].c.size() : 0,
           four_way ? static_cast<Eigen::Index>(act.size()) : 0);
  Eigen::Index col = 0;
  for (std::size_t a = 0; a < act.size(); ++a) {
    const auto& term = m.terms[act[a]];
    xall.middleCols(col, term.X.cols()) = term.X;
    yall.middleCols(col, term.Y.cols()) = term.Y;
    col += term.X.cols();
    b.col(static_cast<Eigen::Index>(a)) = term.b;
    if (four_way) c.col(static_cast<Eigen::Index>(a)) = term.c;
  }

  rep.x_cols = static_cast<std::size_t>(total_l);
  rep.y_cols = static_cast<std::size_t>(total_l);
  rep.x_rank = detail::svd_rank(xall);
  rep.y_rank = detail::svd_rank(yall);
  rep.x_full_rank = rep.x_rank == rep.x_cols;
  rep.y_full_rank = rep.y_rank == rep.y_cols;

  auto column_check = [](const Matrix& mat, double& max_cos) {
    max_cos = 0.0;
    const double max_norm = mat.colwise().norm().maxCoeff();
    bool ok = true;
    for (Eigen::Index i = 0; i < mat.cols(); ++i) {
      const double ni = mat.col(i).norm();
      if (ni <= 1e-12 * max_norm || ni == 0.0) {
        ok = false;
        continue;
      }
      for (Eigen::Index j = i + 1; j < mat.cols(); ++j) {
        const double nj = mat.col(j).norm();
        if (nj <= 1e-12 * max_norm || nj == 0.0) continue;
        max_cos = std::max(max_cos, std::abs(mat.col(i).dot(mat.col(j))) / (ni * nj));
      }
    }
    return ok && max_cos <= kCollinearCos;
  };

  rep.b_ok = column_check(b, rep.max_b_cos);
  if (four_way) {
    rep.c_ok = column_check(c, rep.max_c_cos);
    rep.g_ok = column_check(khatri_rao(c, b), rep.max_g_cos);
  } else {
    rep.c_ok = true;
    rep.max_c_cos = 0.0;
    rep.g_ok = rep.b_ok;
    rep.max_g_cos = rep.max_b_cos;
  }
  rep.all_ok = rep.x_full_rank && rep.y_full_rank && rep.b_ok && rep.c_ok && rep.g_ok;
  return rep;
}

BtdResult btd_llr1(const Tensor& t, const std::vector<std::size_t>& ranks,
                   const SolverOptions& opts) {
  validate_common(t, ranks, opts, 3, "btd_llr1");
  const double t_norm = frobenius_norm(t);
  const Matrix t2 = unfold(t, 2);

  int best_index = -1;
  RestartOutcome best = best_of_restarts(t, ranks, opts, t_norm, &t2, &best_index, "btd_llr1");
  if (opts.gauss_newton_refine) lm_refine(t, best.ws, best.fits, best.warnings, opts, t_norm);
  fix_signs(best.ws);

  BtdResult result;
  result.model = model_from_workspace(best.ws);
  result.history.fits = std::move(best.fits);
  result.history.restart_index = best_index;
  result.history.converged = best.converged;
  result.history.warnings = std::move(best.warnings);
  result.uniqueness = uniqueness_preconditions(result.model);
  return result;
}

BtdResult btd_llr11(const Tensor& t, const std::vector<std::size_t>& ranks,
                    const SolverOptions& opts) {
  validate_common(t, ranks, opts, 4, "btd_llr11");
  const auto& shape = t.shape();
  const auto i3 = static_cast<Eigen::Index>(shape[2]);
  const auto i4 = static_cast<Eigen::Index>(shape[3]);

  // Merging the two trailing modes is a pure relabeling under this layout.
  Tensor t3 = t.reshaped({shape[0], shape[1], shape[2] * shape[3]});
  BtdResult nested = btd_llr1(t3, ranks, opts);

  BtdResult result;
  result.history = std::move(nested.history);
  for (auto& term : nested.model.terms) {
    BtdTerm out;
    out.L = term.L;
    out.empty = term.empty;
    out.X = std::move(term.X);
    out.Y = std::move(term.Y);
    if (out.empty) {
      out.b = Vector::Zero(i3);
      out.c = Vector::Zero(i4);
      result.model.terms.push_back(std::move(out));
      continue;
    }
    // Best separable approximation of the combined third-mode vector.
    Eigen::Map<const Matrix> g(term.b.data(), i3, i4);
    Eigen::JacobiSVD<Matrix> svd(g, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const double sigma = svd.singularValues()(0);
    if (sigma < 1e-12) {
      out.empty = true;
      out.X.setZero();
      out.Y.setZero();
      out.b = Vector::Zero(i3);
      out.c = Vector::Zero(i4);
      result.history.warnings.push_back("near-zero combined mode vector; term emptied");
      result.model.terms.push_back(std::move(out));
      continue;
    }
    out.b = svd.matrixU().col(0);
    out.c = svd.matrixV().col(0);
    out.X *= sigma;
    Eigen::Index idx = 0;
    out.b.cwiseAbs().maxCoeff(&idx);
    if (out.b(idx) < 0.0) {
      out.b = -out.b;
      out.c = -out.c;
    }
    result.model.terms.push_back(std::move(out));
  }
  result.uniqueness = uniqueness_preconditions(result.model);
  return result;
}

BtdResult btd_llr11_direct(const Tensor& t, const std::vector<std::size_t>& ranks,
                           const SolverOptions& opts) {
  validate_common(t, ranks, opts, 4, "btd_llr11_direct");
  const double t_norm = frobenius_norm(t);

  int best_index = -1;
  RestartOutcome best =
      best_of_restarts(t, ranks, opts, t_norm, nullptr, &best_index, "btd_llr11_direct");
  if (opts.gauss_newton_refine)
    best.warnings.push_back("refinement is only available on the nested path; skipped");
  fix_signs(best.ws);

  BtdResult result;
  result.model = model_from_workspace(best.ws);
  result.history.fits = std::move(best.fits);
  result.history.restart_index = best_index;
  result.history.converged = best.converged;
  result.history.warnings = std::move(best.warnings);
  result.uniqueness = uniqueness_preconditions(result.model);
  return result;
}

BtdResult adapted_btd(const Tensor& t, std::size_t n_low, std::size_t L, std::size_t n_high,
                      std::size_t L_high, const SolverOptions& opts) {
  if (n_low + n_high < 1) throw ArgumentError("adapted_btd: no terms requested");
  if (n_high > 0 && L_high <= L)
    throw ArgumentError("adapted_btd: L_high must exceed L");
  std::vector<std::size_t> ranks(n_low, L);
  ranks.insert(ranks.end(), n_high, L_high);
  return btd_llr11(t, ranks, opts);
}

}  // namespace mlbss
