#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mlbss/btd.hpp"
#include "mlbss/cpd.hpp"
#include "mlbss/simgen.hpp"
#include "mlbss/tensor.hpp"

namespace mlbss {

/// Pearson correlation of two equal-length vectors (length >= 2). Throws
/// ArgumentError on a shape violation and NumericalError when either input
/// has zero variance.
double pearson(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& y);

/// One method's output in comparable form: spatial maps as columns over the
/// folded voxel grid (first index fastest) and per-component time courses.
struct ComponentSet {
  Matrix maps;  // voxels x R
  Matrix tcs;   // time x R
};

/// Cross-correlation matrices plus the matched pairing between true and
/// estimated components.
///
/// assignment[r] is the estimate index matched to true source r (-1 when
/// there are fewer estimates than sources). matched_corrs holds the spatial
/// correlation after flipping each matched estimate's sign so that it is
/// >= 0; matched_tc_corrs is the time-course correlation under the same
/// flip (its sign is informative). crosstalk[r] is the largest |map corr|
/// between true source r and any estimate not matched to it.
struct MatchReport {
  Matrix map_corr;  // true x estimated, signed
  Matrix tc_corr;   // true x estimated, signed
  std::vector<int> assignment;
  std::vector<double> matched_corrs;
  std::vector<double> matched_tc_corrs;
  std::vector<double> crosstalk;
  std::string assignment_method;  // "optimal" or "greedy"
};

/// Matches estimated components to ground truth, maximizing the total
/// matched |map corr|. Instances up to 16 estimates use an exact assignment;
/// larger ones fall back to a greedy pass (recorded in assignment_method).
/// Zero-variance columns correlate as 0 rather than raising. Invariant under
/// permutation, sign, and positive scaling of the estimate set.
MatchReport match_components(const ComponentSet& truth, const ComponentSet& estimate);

/// Per-source reference maps: each subject's noise-free voxel time series
/// (observed minus stored noise) are regressed onto the true time courses by
/// ordinary least squares and the coefficient maps are averaged across
/// subjects, weighting every source map by the mean subject activation.
/// Throws NumericalError when B_true is rank deficient. Because the stored
/// signal is exactly trilinear, the regression recovers each map scaled by
/// its mean activation (correlation 1 with the truth source by source).
Matrix reference_maps(const SyntheticDataset& ds);

/// Voxel indices (volume layout) inside the minimum axis-aligned rectangle
/// around the analysis mask, computed slab-wise for 3-way volumes. Covers
/// the whole grid for maskless datasets. Correlation tables are computed
/// over exactly these voxels.
std::vector<std::size_t> hull_indices(const DatasetLayout& layout);

/// One decomposition method in an experiment. `kind` selects the solver:
///   cpd          - canonical polyadic model of the voxels x time x subjects view
///   btd          - rank-(L,L,1,1) block-term model of the folded 4-way view
///   adapted_btd  - block-term model with n_high trailing terms of rank L_high
///   tpica        - tensor probabilistic ICA of the voxels x time x subjects view
struct MethodSpec {
  std::string kind;
  std::size_t components = 3;           // R
  std::vector<std::size_t> term_ranks;  // btd: per-term L_r; empty = uniform L
  std::size_t L = 3;                    // btd/adapted_btd: uniform low rank
  std::size_t n_high = 0;               // adapted_btd: trailing high-rank terms
  std::size_t L_high = 0;               // adapted_btd: their rank
  SolverOptions solver;                 // solver.seed is overwritten per run
  std::string label;                    // row label; defaults to kind
};

/// Experiment description: which generator, at which noise levels, fitted by
/// which methods, replicated how many times. Seeds for replication k are
/// seed + k (dataset and solver alike), so reruns are bitwise reproducible.
struct ExperimentConfig {
  std::string dataset;  // perception | multislice_a | multislice_g | artifact7 | artifact8
  std::uint64_t seed = 1;
  double scale = 1.0;
  std::vector<double> snrs;  // Frobenius signal/noise targets; +inf = noiseless
  std::vector<MethodSpec> methods;
  int replications = 10;
  std::filesystem::path out_dir;  // empty = no files written
  bool write_images = true;       // PGM maps/time-course plots for replication 0
};

/// Result of one (snr, replication, method) cell.
struct RunRecord {
  double snr = 0.0;
  int replication = 0;
  std::string method;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string fail_reason;
  std::vector<double> matched_corrs;
  std::vector<double> matched_tc_corrs;
  std::vector<double> crosstalk;
  std::vector<int> assignment;
  std::vector<std::string> warnings;
  double seconds = 0.0;
};

/// Aggregate over replications for one (method, snr, true source).
struct AggregateRow {
  std::string method;
  double snr = 0.0;
  std::size_t source = 0;     // true-source index, 0-based
  int n = 0;                  // successful replications
  int failures = 0;           // replications skipped for this cell
  double mean_map_corr = 0.0;
  double median_map_corr = 0.0;
  double mean_tc_corr = 0.0;
  double median_tc_corr = 0.0;
  double mean_crosstalk = 0.0;
  double median_crosstalk = 0.0;
};

struct ExperimentSummary {
  ExperimentConfig config;
  std::vector<RunRecord> runs;
  std::vector<AggregateRow> rows;
};

/// Runs the full grid: for every (snr, replication, method) generate the
/// dataset, fit, and match against the OLS reference maps and true time
/// courses; aggregate mean/median matched correlations and crosstalk per
/// (method, snr, source). A failed stage marks its run failed and the cell's
/// aggregate skips it. With out_dir set, writes summary.csv (one row per
/// AggregateRow), one JSON record per run under runs/, and for replication 0
/// grayscale PGM images of true/estimated maps and time-course plots under
/// images/.
ExperimentSummary run_experiment(const ExperimentConfig& cfg);

/// Canned configurations for the `reproduce` command:
///   experiment1   - perception geometry, SNR 0.12/0.08/0.05, tpica/cpd/btd
///   experiment2a  - disjoint multislice, SNR 0.15/0.08, tpica/cpd/btd
///   experiment2g  - overlapped multislice, SNR 0.15/0.08, tpica/cpd/btd
///   experiment3a  - seven-source artifact study at SNR 0.4, tpica/btd
///   experiment3b  - eight-source artifact study at SNR 0.4, uniform vs
///                   adapted block-term models
/// Throws ArgumentError for an unknown name.
ExperimentConfig experiment_preset(const std::string& name);

/// Comparable component sets per method. Maps: CPD uses the spatial factor
/// columns, BTD the vectorized X_r * Y_r', TPICA its spatial map columns;
/// time courses are the matching temporal factors. Full-grid maps — callers
/// restrict rows to hull voxels before correlating.
ComponentSet components_from_cpd(const KruskalModel& m);
ComponentSet components_from_btd(const BtdModel& m);
ComponentSet components_from_tpica(const Matrix& maps, const Matrix& tcs);

/// Writes an 8-bit binary PGM (min-max scaled) of a folded map.
void write_pgm(const std::filesystem::path& path, const Matrix& image);
/// Renders one time course as a polyline PGM: time on the horizontal axis,
/// amplitude vertically, min-max scaled.
void write_tc_plot(const std::filesystem::path& path, const Eigen::Ref<const Vector>& tc);

}  // namespace mlbss
