#include "mlbss/harness.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "mlbss/errors.hpp"
#include "mlbss/tpica.hpp"

namespace mlbss {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Correlation that reports 0 instead of raising on a flat input; matching
// must tolerate dead components (e.g. an emptied block term).
double safe_corr(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& y) {
  const auto n = x.size();
  if (n != y.size() || n < 2) return 0.0;
  const Vector xc = x.array() - x.mean();
  const Vector yc = y.array() - y.mean();
  const double den = xc.norm() * yc.norm();
  if (den <= 0.0 || !std::isfinite(den)) return 0.0;
  return std::clamp(xc.dot(yc) / den, -1.0, 1.0);
}

double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Exact assignment maximizing total weight over injections of rows (true
// sources) into columns (estimates): dynamic program over used-column masks.
// Rows may stay unassigned (-1) only when columns run short; weights are
// nonnegative, and ties prefer assigning the lowest column index.
std::vector<int> assign_optimal(const Matrix& w) {
  const int nt = static_cast<int>(w.rows());
  const int ne = static_cast<int>(w.cols());
  const std::size_t masks = std::size_t{1} << ne;
  std::vector<double> dp(masks * static_cast<std::size_t>(nt + 1), kNegInf);
  std::vector<int> choice(masks * static_cast<std::size_t>(nt + 1), -2);
  auto at = [ne, masks](int i, std::size_t m) { return static_cast<std::size_t>(i) * masks + m; };
  (void)ne;
  dp[at(0, 0)] = 0.0;
  for (int i = 0; i < nt; ++i) {
    for (std::size_t m = 0; m < masks; ++m) {
      const double base = dp[at(i, m)];
      if (base == kNegInf) continue;
      for (int j = 0; j < ne; ++j) {
        if (m & (std::size_t{1} << j)) continue;
        const std::size_t m2 = m | (std::size_t{1} << j);
        const double cand = base + w(i, j);
        if (cand > dp[at(i + 1, m2)]) {
          dp[at(i + 1, m2)] = cand;
          choice[at(i + 1, m2)] = j;
        }
      }
      // Leaving source i unmatched is only sensible once every estimate is
      // taken, but the transition is kept unconditional for correctness.
      if (base > dp[at(i + 1, m)]) {
        dp[at(i + 1, m)] = base;
        choice[at(i + 1, m)] = -1;
      }
    }
  }
  std::size_t best_mask = 0;
  double best = kNegInf;
  for (std::size_t m = 0; m < masks; ++m)
    if (dp[at(nt, m)] > best) {
      best = dp[at(nt, m)];
      best_mask = m;
    }
  std::vector<int> assignment(static_cast<std::size_t>(nt), -1);
  std::size_t m = best_mask;
  for (int i = nt; i > 0; --i) {
    const int j = choice[at(i, m)];
    assignment[static_cast<std::size_t>(i - 1)] = j;
    if (j >= 0) m &= ~(std::size_t{1} << j);
  }
  return assignment;
}

// Fallback for implausibly wide instances: repeatedly take the largest
// remaining weight.
std::vector<int> assign_greedy(const Matrix& w) {
  const int nt = static_cast<int>(w.rows());
  const int ne = static_cast<int>(w.cols());
  std::vector<int> assignment(static_cast<std::size_t>(nt), -1);
  std::vector<bool> row_done(static_cast<std::size_t>(nt), false);
  std::vector<bool> col_done(static_cast<std::size_t>(ne), false);
  const int pairs = std::min(nt, ne);
  for (int k = 0; k < pairs; ++k) {
    double best = kNegInf;
    int bi = -1, bj = -1;
    for (int i = 0; i < nt; ++i) {
      if (row_done[static_cast<std::size_t>(i)]) continue;
      for (int j = 0; j < ne; ++j) {
        if (col_done[static_cast<std::size_t>(j)]) continue;
        if (w(i, j) > best) {
          best = w(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    assignment[static_cast<std::size_t>(bi)] = bj;
    row_done[static_cast<std::size_t>(bi)] = true;
    col_done[static_cast<std::size_t>(bj)] = true;
  }
  return assignment;
}

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  return out;
}

std::string format_snr(double snr) {
  if (std::isinf(snr)) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", snr);
  return buf;
}

nlohmann::json snr_json(double snr) {
  if (std::isinf(snr)) return "inf";
  return snr;
}

SyntheticDataset make_dataset(const std::string& name, std::uint64_t seed, double scale) {
  if (name == "perception") return gen_perception(seed, scale);
  if (name == "multislice_a") return gen_multislice(MultisliceVariant::A, seed, scale);
  if (name == "multislice_g") return gen_multislice(MultisliceVariant::G, seed, scale);
  if (name == "artifact7") return gen_artifact_study(false, seed, scale);
  if (name == "artifact8") return gen_artifact_study(true, seed, scale);
  throw ArgumentError("unknown dataset: " + name);
}

std::vector<std::size_t> btd_term_ranks(const MethodSpec& m) {
  if (!m.term_ranks.empty()) return m.term_ranks;
  return std::vector<std::size_t>(m.components, m.L);
}

struct FitOutput {
  ComponentSet comps;
  std::vector<std::string> warnings;
};

FitOutput fit_method(const MethodSpec& m, const SyntheticDataset& ds, SolverOptions solver) {
  if (m.kind == "cpd") {
    const CpdResult r = cpd_als(ds.observed_vec, m.components, solver);
    return {components_from_cpd(r.model), r.history.warnings};
  }
  if (m.kind == "btd") {
    const BtdResult r = btd_llr11(ds.observed, btd_term_ranks(m), solver);
    return {components_from_btd(r.model), r.history.warnings};
  }
  if (m.kind == "adapted_btd") {
    if (m.n_high == 0 || m.n_high > m.components)
      throw ArgumentError("adapted_btd method needs 0 < n_high <= components");
    const BtdResult r =
        adapted_btd(ds.observed, m.components - m.n_high, m.L, m.n_high, m.L_high, solver);
    return {components_from_btd(r.model), r.history.warnings};
  }
  if (m.kind == "tpica") {
    const TpicaModel r = tpica(ds.observed_vec, m.components, solver);
    FitOutput out{components_from_tpica(r.A, r.B), {}};
    if (!r.converged) out.warnings.push_back("ica iteration limit reached");
    return out;
  }
  throw ArgumentError("unknown method kind: " + m.kind);
}

Matrix restrict_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

void validate_config(const ExperimentConfig& cfg) {
  if (cfg.replications < 1) throw ArgumentError("replications must be >= 1");
  if (cfg.snrs.empty()) throw ArgumentError("at least one SNR is required");
  for (double s : cfg.snrs)
    if (!(s > 0.0)) throw ArgumentError("SNR targets must be positive");
  if (cfg.methods.empty()) throw ArgumentError("at least one method is required");
  if (!(cfg.scale > 0.0)) throw ArgumentError("scale must be positive");
}

std::string method_label(const MethodSpec& m) { return m.label.empty() ? m.kind : m.label; }

nlohmann::json run_to_json(const ExperimentConfig& cfg, const RunRecord& rec) {
  nlohmann::json j{{"dataset", cfg.dataset},
                   {"scale", cfg.scale},
                   {"method", rec.method},
                   {"snr", snr_json(rec.snr)},
                   {"replication", rec.replication},
                   {"seed", rec.seed},
                   {"failed", rec.failed},
                   {"seconds", rec.seconds}};
  if (rec.failed) {
    j["fail_reason"] = rec.fail_reason;
  } else {
    j["matched_corrs"] = rec.matched_corrs;
    j["matched_tc_corrs"] = rec.matched_tc_corrs;
    j["crosstalk"] = rec.crosstalk;
    j["assignment"] = rec.assignment;
  }
  if (!rec.warnings.empty()) j["warnings"] = rec.warnings;
  return j;
}

nlohmann::json config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json methods = nlohmann::json::array();
  for (const MethodSpec& m : cfg.methods) {
    nlohmann::json jm{{"kind", m.kind},
                      {"label", method_label(m)},
                      {"components", m.components},
                      {"restarts", m.solver.restarts},
                      {"max_iters", m.solver.max_iters},
                      {"tol", m.solver.tol}};
    if (m.kind == "btd" || m.kind == "adapted_btd") {
      jm["L"] = m.L;
      if (!m.term_ranks.empty()) jm["term_ranks"] = m.term_ranks;
      if (m.n_high > 0) {
        jm["n_high"] = m.n_high;
        jm["L_high"] = m.L_high;
      }
      jm["gauss_newton_refine"] = m.solver.gauss_newton_refine;
    }
    methods.push_back(std::move(jm));
  }
  nlohmann::json snrs = nlohmann::json::array();
  for (double s : cfg.snrs) snrs.push_back(snr_json(s));
  return nlohmann::json{{"dataset", cfg.dataset}, {"seed", cfg.seed},
                        {"scale", cfg.scale},     {"snrs", std::move(snrs)},
                        {"methods", std::move(methods)}, {"replications", cfg.replications}};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArgumentError("cannot open " + path.string() + " for writing");
  out << text;
}

Matrix fold_map(const Eigen::Ref<const Vector>& v, const DatasetLayout& lay) {
  return Eigen::Map<const Matrix>(v.data(), static_cast<Eigen::Index>(lay.fold_rows),
                                  static_cast<Eigen::Index>(lay.fold_cols));
}

}  // namespace

double pearson(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& y) {
  if (x.size() != y.size())
    throw ArgumentError("pearson: length mismatch");
  if (x.size() < 2) throw ArgumentError("pearson: need at least two samples");
  const Vector xc = x.array() - x.mean();
  const Vector yc = y.array() - y.mean();
  const double den = xc.norm() * yc.norm();
  if (den <= 0.0 || !std::isfinite(den))
    throw NumericalError("pearson: undefined correlation for zero-variance input");
  return std::clamp(xc.dot(yc) / den, -1.0, 1.0);
}

MatchReport match_components(const ComponentSet& truth, const ComponentSet& estimate) {
  const Eigen::Index nt = truth.maps.cols();
  const Eigen::Index ne = estimate.maps.cols();
  if (ne < 1) throw ArgumentError("match_components: no estimated components");
  if (truth.maps.rows() != estimate.maps.rows())
    throw ArgumentError("match_components: map voxel counts differ");
  if (truth.tcs.cols() != nt || estimate.tcs.cols() != ne)
    throw ArgumentError("match_components: time-course column counts differ from maps");
  if (truth.tcs.rows() != estimate.tcs.rows())
    throw ArgumentError("match_components: time-course lengths differ");

  MatchReport rep;
  rep.map_corr.resize(nt, ne);
  rep.tc_corr.resize(nt, ne);
  for (Eigen::Index i = 0; i < nt; ++i)
    for (Eigen::Index j = 0; j < ne; ++j) {
      rep.map_corr(i, j) = safe_corr(truth.maps.col(i), estimate.maps.col(j));
      rep.tc_corr(i, j) = safe_corr(truth.tcs.col(i), estimate.tcs.col(j));
    }

  const Matrix weights = rep.map_corr.cwiseAbs();
  if (ne <= 16) {
    rep.assignment = assign_optimal(weights);
    rep.assignment_method = "optimal";
  } else {
    rep.assignment = assign_greedy(weights);
    rep.assignment_method = "greedy";
  }

  rep.matched_corrs.assign(static_cast<std::size_t>(nt), 0.0);
  rep.matched_tc_corrs.assign(static_cast<std::size_t>(nt), 0.0);
  rep.crosstalk.assign(static_cast<std::size_t>(nt), 0.0);
  for (Eigen::Index i = 0; i < nt; ++i) {
    const int j = rep.assignment[static_cast<std::size_t>(i)];
    if (j >= 0) {
      const double c = rep.map_corr(i, j);
      const double sign = c < 0.0 ? -1.0 : 1.0;
      rep.matched_corrs[static_cast<std::size_t>(i)] = sign * c;
      rep.matched_tc_corrs[static_cast<std::size_t>(i)] = sign * rep.tc_corr(i, j);
    }
    double xt = 0.0;
    for (Eigen::Index k = 0; k < ne; ++k)
      if (static_cast<int>(k) != j) xt = std::max(xt, std::abs(rep.map_corr(i, k)));
    rep.crosstalk[static_cast<std::size_t>(i)] = xt;
  }
  return rep;
}

Matrix reference_maps(const SyntheticDataset& ds) {
  const Matrix& b = ds.B_true;
  const auto r = b.cols();
  Eigen::ColPivHouseholderQR<Matrix> qr(b);
  if (qr.rank() < r)
    throw NumericalError("reference_maps: true time courses are rank deficient");

  const auto& shape = ds.observed_vec.shape();
  const auto voxels = static_cast<Eigen::Index>(shape[0]);
  const auto tlen = static_cast<Eigen::Index>(shape[1]);
  const auto subjects = static_cast<Eigen::Index>(shape[2]);
  if (tlen != b.rows()) throw ArgumentError("reference_maps: time axis mismatch");
  const bool have_noise = ds.noise.size() == ds.observed_vec.size();

  // OLS per subject on the noise-free signal: coefficients = S * B (B'B)^-1,
  // averaged over subjects. The references are the yardstick every estimate is
  // judged against, so they are anchored to the clean signal; regressing the
  // observation instead would let the noise level move the yardstick itself.
  const Matrix gram_inv = (b.transpose() * b).ldlt().solve(Matrix::Identity(r, r));
  Matrix avg = Matrix::Zero(voxels, r);
  Matrix y(voxels, tlen);
  for (Eigen::Index s = 0; s < subjects; ++s) {
    const auto offset = s * voxels * tlen;
    y = Eigen::Map<const Matrix>(ds.observed_vec.data() + offset, voxels, tlen);
    if (have_noise) y -= Eigen::Map<const Matrix>(ds.noise.data() + offset, voxels, tlen);
    avg.noalias() += y * b * gram_inv;
  }
  return avg / static_cast<double>(subjects);
}

std::vector<std::size_t> hull_indices(const DatasetLayout& layout) {
  const auto& vs = layout.volume_shape;
  if (vs.empty()) throw ArgumentError("hull_indices: layout has no volume shape");
  const std::size_t nx = vs[0];
  const std::size_t ny = vs.size() > 1 ? vs[1] : 1;
  const std::size_t nslab = vs.size() > 2 ? vs[2] : 1;
  const std::size_t nvox = nx * ny * nslab;

  std::vector<std::size_t> idx;
  if (layout.mask.size() != nvox) {  // maskless or legacy layout: whole grid
    idx.resize(nvox);
    for (std::size_t v = 0; v < nvox; ++v) idx[v] = v;
    return idx;
  }
  for (std::size_t k = 0; k < nslab; ++k) {
    std::size_t i0 = nx, i1 = 0, j0 = ny, j1 = 0;
    bool any = false;
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i)
        if (layout.mask[i + nx * (j + ny * k)]) {
          any = true;
          i0 = std::min(i0, i);
          i1 = std::max(i1, i);
          j0 = std::min(j0, j);
          j1 = std::max(j1, j);
        }
    if (!any) continue;
    for (std::size_t j = j0; j <= j1; ++j)
      for (std::size_t i = i0; i <= i1; ++i) idx.push_back(i + nx * (j + ny * k));
  }
  if (idx.empty()) throw ArgumentError("hull_indices: empty analysis mask");
  return idx;
}

ComponentSet components_from_cpd(const KruskalModel& m) {
  if (m.order() < 2) throw ArgumentError("components_from_cpd: need a spatial and a time factor");
  return {m.factors[0], m.factors[1]};
}

ComponentSet components_from_btd(const BtdModel& m) {
  if (m.terms.empty()) throw ArgumentError("components_from_btd: empty model");
  const Eigen::Index voxels = m.terms[0].X.rows() * m.terms[0].Y.rows();
  const Eigen::Index tlen = m.terms[0].b.size();
  ComponentSet out;
  out.maps.resize(voxels, static_cast<Eigen::Index>(m.terms.size()));
  out.tcs.resize(tlen, static_cast<Eigen::Index>(m.terms.size()));
  for (std::size_t r = 0; r < m.terms.size(); ++r) {
    const BtdTerm& term = m.terms[r];
    const Matrix slab = term.X * term.Y.transpose();
    out.maps.col(static_cast<Eigen::Index>(r)) = Eigen::Map<const Vector>(slab.data(), voxels);
    out.tcs.col(static_cast<Eigen::Index>(r)) = term.b;
  }
  return out;
}

ComponentSet components_from_tpica(const Matrix& maps, const Matrix& tcs) {
  if (maps.cols() != tcs.cols())
    throw ArgumentError("components_from_tpica: column counts differ");
  return {maps, tcs};
}

void write_pgm(const std::filesystem::path& path, const Matrix& image) {
  const double lo = image.minCoeff();
  const double hi = image.maxCoeff();
  const double span = hi > lo ? hi - lo : 1.0;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArgumentError("cannot open " + path.string() + " for writing");
  out << "P5\n" << image.cols() << " " << image.rows() << "\n255\n";
  for (Eigen::Index i = 0; i < image.rows(); ++i)
    for (Eigen::Index j = 0; j < image.cols(); ++j) {
      const double v = (image(i, j) - lo) / span;
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
}

void write_tc_plot(const std::filesystem::path& path, const Eigen::Ref<const Vector>& tc) {
  const Eigen::Index n = tc.size();
  if (n < 2) throw ArgumentError("write_tc_plot: need at least two samples");
  constexpr Eigen::Index height = 101;
  const double lo = tc.minCoeff();
  const double hi = tc.maxCoeff();
  const double span = hi > lo ? hi - lo : 1.0;
  Matrix img = Matrix::Zero(height, n);
  auto level = [&](double v) {
    return height - 1 - static_cast<Eigen::Index>(std::lround((v - lo) / span * (height - 1)));
  };
  Eigen::Index prev = level(tc(0));
  img(prev, 0) = 1.0;
  for (Eigen::Index t = 1; t < n; ++t) {
    const Eigen::Index cur = level(tc(t));
    for (Eigen::Index y = std::min(prev, cur); y <= std::max(prev, cur); ++y) img(y, t) = 1.0;
    prev = cur;
  }
  write_pgm(path, img);
}

ExperimentSummary run_experiment(const ExperimentConfig& cfg) {
  validate_config(cfg);

  struct Cell {  // one (snr, replication): shared dataset, one run per method
    double snr;
    int replication;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (double snr : cfg.snrs)
    for (int rep = 0; rep < cfg.replications; ++rep)
      cells.push_back({snr, rep, cfg.seed + static_cast<std::uint64_t>(rep)});

  const std::size_t n_methods = cfg.methods.size();
  ExperimentSummary summary;
  summary.config = cfg;
  summary.runs.resize(cells.size() * n_methods);

  // For replication 0 of each SNR, keep folded truth/estimate maps around for
  // image output.
  struct ImageCell {
    bool present = false;
    DatasetLayout layout;
    Matrix truth_maps;  // voxels x R (true folded sources)
    Matrix truth_tcs;
    std::vector<Matrix> est_maps;  // per method
    std::vector<Matrix> est_tcs;
  };
  std::vector<ImageCell> image_cells(cfg.snrs.size());

#pragma omp parallel for schedule(dynamic, 1)
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const Cell& cell = cells[c];
    RunRecord* recs = summary.runs.data() + c * n_methods;
    for (std::size_t m = 0; m < n_methods; ++m) {
      recs[m].snr = cell.snr;
      recs[m].replication = cell.replication;
      recs[m].method = method_label(cfg.methods[m]);
      recs[m].seed = cell.seed;
    }

    SyntheticDataset ds;
    ComponentSet truth;
    std::vector<std::size_t> hull;
    try {
      ds = with_target_snr(make_dataset(cfg.dataset, cell.seed, cfg.scale), cell.snr);
      hull = hull_indices(ds.layout);
      truth.maps = restrict_rows(reference_maps(ds), hull);
      truth.tcs = ds.B_true;
    } catch (const std::exception& e) {
      for (std::size_t m = 0; m < n_methods; ++m) {
        recs[m].failed = true;
        recs[m].fail_reason = std::string("dataset stage: ") + e.what();
      }
      continue;
    }

    const std::size_t snr_index = c / static_cast<std::size_t>(cfg.replications);
    ImageCell* img = nullptr;
    if (cell.replication == 0 && cfg.write_images && !cfg.out_dir.empty()) {
      img = &image_cells[snr_index];
      img->present = true;
      img->layout = ds.layout;
      const auto voxels = static_cast<Eigen::Index>(ds.sources[0].size());
      img->truth_maps.resize(voxels, static_cast<Eigen::Index>(ds.sources.size()));
      for (std::size_t r = 0; r < ds.sources.size(); ++r)
        img->truth_maps.col(static_cast<Eigen::Index>(r)) =
            Eigen::Map<const Vector>(ds.sources[r].data(), voxels);
      img->truth_tcs = ds.B_true;
      img->est_maps.resize(n_methods);
      img->est_tcs.resize(n_methods);
    }

    for (std::size_t m = 0; m < n_methods; ++m) {
      RunRecord& rec = recs[m];
      const auto t0 = std::chrono::steady_clock::now();
      try {
        SolverOptions solver = cfg.methods[m].solver;
        solver.seed = cell.seed;
        FitOutput fit = fit_method(cfg.methods[m], ds, solver);
        rec.warnings = fit.warnings;
        if (img) {
          img->est_maps[m] = fit.comps.maps;
          img->est_tcs[m] = fit.comps.tcs;
        }
        fit.comps.maps = restrict_rows(fit.comps.maps, hull);
        const MatchReport match = match_components(truth, fit.comps);
        rec.matched_corrs = match.matched_corrs;
        rec.matched_tc_corrs = match.matched_tc_corrs;
        rec.crosstalk = match.crosstalk;
        rec.assignment = match.assignment;
      } catch (const std::exception& e) {
        rec.failed = true;
        rec.fail_reason = e.what();
      }
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  }

  // Deterministic reduction: runs are already in (snr, replication, method)
  // order regardless of scheduling.
  const std::size_t n_sources = [&] {
    for (const RunRecord& r : summary.runs)
      if (!r.failed) return r.matched_corrs.size();
    return std::size_t{0};
  }();
  for (std::size_t si = 0; si < cfg.snrs.size(); ++si) {
    for (std::size_t m = 0; m < n_methods; ++m) {
      std::vector<std::vector<double>> maps(n_sources), tcs(n_sources), xts(n_sources);
      int failures = 0;
      for (int rep = 0; rep < cfg.replications; ++rep) {
        const RunRecord& rec =
            summary.runs[(si * static_cast<std::size_t>(cfg.replications) +
                          static_cast<std::size_t>(rep)) *
                             n_methods +
                         m];
        if (rec.failed) {
          ++failures;
          continue;
        }
        for (std::size_t r = 0; r < n_sources && r < rec.matched_corrs.size(); ++r) {
          maps[r].push_back(rec.matched_corrs[r]);
          tcs[r].push_back(rec.matched_tc_corrs[r]);
          xts[r].push_back(rec.crosstalk[r]);
        }
      }
      for (std::size_t r = 0; r < n_sources; ++r) {
        AggregateRow row;
        row.method = method_label(cfg.methods[m]);
        row.snr = cfg.snrs[si];
        row.source = r;
        row.n = static_cast<int>(maps[r].size());
        row.failures = failures;
        row.mean_map_corr = mean_of(maps[r]);
        row.median_map_corr = median_of(maps[r]);
        row.mean_tc_corr = mean_of(tcs[r]);
        row.median_tc_corr = median_of(tcs[r]);
        row.mean_crosstalk = mean_of(xts[r]);
        row.median_crosstalk = median_of(xts[r]);
        summary.rows.push_back(row);
      }
    }
  }

  if (!cfg.out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir / "runs");
    write_text(cfg.out_dir / "config.json", config_to_json(cfg).dump(2) + "\n");

    std::ostringstream csv;
    csv << "method,snr,source,n,failures,mean_map_corr,median_map_corr,mean_tc_corr,"
           "median_tc_corr,mean_crosstalk,median_crosstalk\n";
    char buf[64];
    for (const AggregateRow& row : summary.rows) {
      csv << row.method << ',' << format_snr(row.snr) << ',' << row.source + 1 << ',' << row.n
          << ',' << row.failures;
      const double vals[6] = {row.mean_map_corr,  row.median_map_corr, row.mean_tc_corr,
                              row.median_tc_corr, row.mean_crosstalk,  row.median_crosstalk};
      for (double v : vals) {
        std::snprintf(buf, sizeof buf, "%.4f", v);
        csv << ',' << buf;
      }
      csv << '\n';
    }
    write_text(cfg.out_dir / "summary.csv", csv.str());

    for (const RunRecord& rec : summary.runs) {
      const std::string name = sanitize(rec.method) + "_snr" + format_snr(rec.snr) + "_rep" +
                               std::to_string(rec.replication) + ".json";
      write_text(cfg.out_dir / "runs" / name, run_to_json(cfg, rec).dump(2) + "\n");
    }

    if (cfg.write_images) {
      for (std::size_t si = 0; si < cfg.snrs.size(); ++si) {
        const ImageCell& img = image_cells[si];
        if (!img.present) continue;
        const fs::path dir = cfg.out_dir / "images" / ("snr" + format_snr(cfg.snrs[si]));
        fs::create_directories(dir);
        for (Eigen::Index r = 0; r < img.truth_maps.cols(); ++r) {
          write_pgm(dir / ("truth_map" + std::to_string(r + 1) + ".pgm"),
                    fold_map(img.truth_maps.col(r), img.layout));
          write_tc_plot(dir / ("truth_tc" + std::to_string(r + 1) + ".pgm"),
                        img.truth_tcs.col(r));
        }
        for (std::size_t m = 0; m < n_methods; ++m) {
          if (img.est_maps[m].size() == 0) continue;
          const std::string label = sanitize(method_label(cfg.methods[m]));
          for (Eigen::Index r = 0; r < img.est_maps[m].cols(); ++r) {
            write_pgm(dir / (label + "_map" + std::to_string(r + 1) + ".pgm"),
                      fold_map(img.est_maps[m].col(r), img.layout));
            write_tc_plot(dir / (label + "_tc" + std::to_string(r + 1) + ".pgm"),
                          img.est_tcs[m].col(r));
          }
        }
      }
    }
  }
  return summary;
}

ExperimentConfig experiment_preset(const std::string& name) {
  auto solver = [](int restarts, int iters, double tol) {
    SolverOptions o;
    o.restarts = restarts;
    o.max_iters = iters;
    o.tol = tol;
    return o;
  };
  auto method = [](const char* kind, std::size_t components) {
    MethodSpec m;
    m.kind = kind;
    m.components = components;
    return m;
  };

  ExperimentConfig cfg;
  cfg.seed = 20240601;
  cfg.replications = 10;

  if (name == "experiment1") {
    cfg.dataset = "perception";
    cfg.scale = 0.5;
    cfg.snrs = {0.12, 0.08, 0.05};
    MethodSpec tp = method("tpica", 3);
    tp.solver = solver(2, 400, 1e-7);
    MethodSpec cp = method("cpd", 3);
    cp.solver = solver(2, 150, 1e-7);
    MethodSpec bt = method("btd", 3);
    bt.L = 3;
    bt.solver = solver(2, 150, 1e-7);
    cfg.methods = {tp, cp, bt};
    return cfg;
  }
  if (name == "experiment2a" || name == "experiment2g") {
    cfg.dataset = name == "experiment2a" ? "multislice_a" : "multislice_g";
    cfg.scale = 1.0;
    cfg.snrs = name == "experiment2a" ? std::vector<double>{0.08, 0.06, 0.04}
                                      : std::vector<double>{0.15, 0.12, 0.08};
    MethodSpec tp = method("tpica", 3);
    tp.solver = solver(2, 400, 1e-7);
    MethodSpec cp = method("cpd", 3);
    cp.solver = solver(2, 150, 1e-7);
    MethodSpec bt = method("btd", 3);
    bt.L = 3;
    bt.solver = solver(2, 150, 1e-7);
    bt.solver.gauss_newton_refine = true;
    bt.solver.gn_max_iters = 30;
    cfg.methods = {tp, cp, bt};
    return cfg;
  }
  if (name == "experiment3a") {
    cfg.dataset = "artifact7";
    cfg.scale = 0.5;
    cfg.snrs = {0.4};
    MethodSpec tp = method("tpica", 7);
    tp.solver = solver(2, 400, 1e-7);
    MethodSpec bt = method("btd", 7);
    bt.L = 5;
    bt.solver = solver(2, 120, 1e-7);
    cfg.methods = {tp, bt};
    return cfg;
  }
  if (name == "experiment3b") {
    cfg.dataset = "artifact8";
    cfg.scale = 0.5;
    cfg.snrs = {0.4};
    MethodSpec uniform = method("btd", 8);
    uniform.L = 5;
    uniform.label = "btd_uniform";
    uniform.solver = solver(2, 120, 1e-7);
    MethodSpec adapted = method("adapted_btd", 8);
    adapted.L = 5;
    adapted.n_high = 2;
    adapted.L_high = 30;
    adapted.label = "btd_adapted2";
    adapted.solver = solver(2, 120, 1e-7);
    MethodSpec adapted4 = adapted;
    adapted4.n_high = 4;
    adapted4.label = "btd_adapted4";
    cfg.methods = {uniform, adapted, adapted4};
    return cfg;
  }
  throw ArgumentError("unknown experiment preset: " + name);
}

}  // namespace mlbss
