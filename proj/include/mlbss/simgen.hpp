#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mlbss/tensor.hpp"

namespace mlbss {

/// Canonical haemodynamic response parameters (difference of gammas).
struct HrfSpec {
  double peak_delay = 6.0;              // seconds to the response peak
  double undershoot_delay = 16.0;       // seconds to the undershoot trough
  double undershoot_ratio = 1.0 / 6.0;  // trough depth relative to the peak
  double tr = 1.0;                      // sampling interval in seconds
};

// h(t) = g(t; peak) - ratio * g(t; undershoot) sampled at t = i*tr, where
// g(t; d) = (t/d)^d * exp(d - t) is a gamma bump peaking at t = d with unit
// height. The result is normalized so its maximum is exactly 1.
// Throws ArgumentError for length == 0, non-positive delays/tr, or a ratio
// outside (0, 1).
Vector hrf(const HrfSpec& spec, std::size_t length);

// Causal convolution of a stimulus with hrf(spec, stimulus.size()), truncated
// to the stimulus length: out(t) = sum_{u<=t} stimulus(u) * h(t-u).
Vector hrf_convolve(const Vector& stimulus, const HrfSpec& spec = {});

/// Geometry bookkeeping for a generated dataset: where the sources live and
/// how the spatial volume folds into the matrix modes of the observed tensor.
struct DatasetLayout {
  std::string variant;                    // generator tag, e.g. "perception"
  double scale = 1.0;                     // geometry scale factor used
  std::vector<std::size_t> volume_shape;  // spatial shape of each source volume
  std::size_t fold_rows = 0;              // folded spatial matrix is fold_rows x fold_cols
  std::size_t fold_cols = 0;
  std::size_t mask_voxels = 0;               // in-mask voxels (== all voxels when maskless)
  std::vector<std::size_t> mask_counts;      // per-slab in-mask counts (empty when maskless)
  // Per-voxel analysis mask in volume layout (1 = in mask). All ones for
  // maskless generators; evaluation restricts correlations to the minimum
  // rectangle(s) enclosing this mask.
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> active_counts;    // active voxels per source
  std::vector<std::vector<std::size_t>> shared_counts;  // pairwise active-set intersections
  std::vector<std::string> source_kinds;     // per-source descriptor, e.g. "blobs", "gaussian-field"
  std::vector<std::string> course_kinds;     // per-source time-course descriptor
  // Axis-aligned active rectangles per source as {row, col, height, width, slab};
  // empty for full-field sources.
  std::vector<std::vector<std::array<std::size_t, 5>>> source_rects;
};

/// Ground truth plus observation for one synthetic acquisition.
///
/// observed == signal + noise holds elementwise and bitwise, where the signal
/// is lowrank_outer_full(folded sources, B_true, C_true). observed_vec is the
/// same data reshaped to voxels x time x subjects (a pure metadata reshape
/// under the first-index-fastest layout, so both views share identical voxel
/// values).
struct SyntheticDataset {
  std::vector<Tensor> sources;  // ground-truth spatial volumes, one per source
  Matrix B_true;                // time x R time courses
  Matrix C_true;                // subjects x R activation levels
  Tensor noise;                 // folded, same shape as observed
  Tensor observed;              // fold_rows x fold_cols x time x subjects
  Tensor observed_vec;          // voxels x time x subjects view of observed
  double snr = 0.0;             // achieved ||signal||_F / ||noise||_F
  std::uint64_t seed = 0;
  DatasetLayout layout;
};

// ||signal||_F / ||noise||_F. Shapes must match; zero noise returns +infinity.
double snr_of(const Tensor& signal, const Tensor& noise);

// noise * (||signal|| / (target * ||noise||)), so snr_of(signal, result) hits
// the target to 1e-9. Throws ArgumentError for non-finite or non-positive
// targets, shape mismatch, or a zero-norm signal or noise.
Tensor scale_noise_to_snr(const Tensor& signal, const Tensor& noise, double target);

// Copy of the dataset with its noise rescaled to the target SNR and both
// observed views rebuilt as signal + rescaled noise. A target of +infinity
// removes the noise entirely.
SyntheticDataset with_target_snr(const SyntheticDataset& ds, double target);

// Three overlapping sources on a 60x50 slice (scaled by `scale`): per-voxel
// amplitudes i.i.d. Uniform[0.8, 1.2], the second and third source sharing
// half their active voxels, 30 s on/off block time courses over 180 s with
// staggered phases, unit white noise, and subject loadings
// C = [[3,4,5],[2,3,4],[2,2,3]] times the mean noise standard deviation.
// Total active fraction lands in [3%, 6%] of the slice.
SyntheticDataset gen_perception(std::uint64_t seed, double scale = 1.0);

enum class MultisliceVariant { A, G };

// Three sources across three elliptically masked 42x30 slabs. Variant A keeps
// the sources disjoint with active counts 45/90/54 against per-slab mask sizes
// 962/838/689 (within 2%); variant G enlarges sources 1 and 2 so they share
// 51% and 63% of their active voxels respectively. Time courses are a block
// design, a fixed-interval event train, and a random-interval event train,
// each convolved with the canonical HRF; noise is Gaussian with a smooth
// per-voxel variance field in [0.5, 1.5] times its in-mask mean and is zero
// outside the slab masks (nothing is recorded there). Source maps are
// built from separable-profile rectangles, so each folded map has matrix rank
// at most 2 and the noiseless observation is an exact 3-term block-term model.
SyntheticDataset gen_multislice(MultisliceVariant variant, std::uint64_t seed, double scale = 1.0);

// Eight sources on a 60x60 slice spanning the distributional taxonomy:
// sparse super-Gaussian blob maps (1, 2, 5, 6), a sub-Gaussian full-field
// ripple (3), an i.i.d. Gaussian field (4, weakest power; dropped when
// include_gaussian_source is false), a sub-Gaussian smooth clipped field of
// high spatial rank (7), and a dominant-energy scatter of point spikes with
// rank > 20 (8). Task-locked time courses are HRF-convolved; artifact courses
// are drifts, oscillations, and spike trains.
SyntheticDataset gen_artifact_study(bool include_gaussian_source, std::uint64_t seed,
                                    double scale = 1.0);

// JSON sidecar describing the dataset: variant, seed, scale, achieved SNR,
// geometry, per-source locations, and time-course metadata. Enough to
// reproduce the exact acquisition together with the generator seed.
std::string dataset_metadata_json(const SyntheticDataset& ds);

}  // namespace mlbss
