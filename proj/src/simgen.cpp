#include "mlbss/simgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mlbss/kernels.hpp"
#include "mlbss/random.hpp"

namespace mlbss {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::size_t scaled_dim(double base, double scale, std::size_t min_value = 1) {
  const auto v = static_cast<std::size_t>(std::llround(base * scale));
  return std::max(v, min_value);
}

std::size_t scaled_pos(double base, double scale) {
  return static_cast<std::size_t>(std::llround(base * scale));
}

void require_scale(double scale, const char* who) {
  if (!std::isfinite(scale) || !(scale > 0.0))
    throw ArgumentError(std::string(who) + ": scale must be positive and finite");
}

double unif(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Active rectangle: rows [r0, r0+h), cols [c0, c0+w) of slab `slab`
// (slab fixed to 0 for single-slice volumes).
struct Rect {
  std::size_t r0, c0, h, w, slab = 0;
};

double& vol_at(Tensor& v, std::size_t i, std::size_t j, std::size_t slab) {
  const auto& sh = v.shape();
  const std::size_t off = (sh.size() == 2) ? i + sh[0] * j : i + sh[0] * (j + sh[1] * slab);
  return v.data()[off];
}

void require_rect_fits(const Tensor& vol, const Rect& rc, const char* who) {
  const auto& sh = vol.shape();
  const std::size_t slabs = sh.size() == 2 ? 1 : sh[2];
  if (rc.h == 0 || rc.w == 0 || rc.r0 + rc.h > sh[0] || rc.c0 + rc.w > sh[1] || rc.slab >= slabs)
    throw ArgumentError(std::string(who) + ": geometry too small to place the sources");
}

// Per-voxel amplitudes i.i.d. Uniform[0.8, 1.2].
void fill_rect_iid(Tensor& vol, const Rect& rc, std::mt19937_64& rng) {
  for (std::size_t j = 0; j < rc.w; ++j)
    for (std::size_t i = 0; i < rc.h; ++i)
      vol_at(vol, rc.r0 + i, rc.c0 + j, rc.slab) = unif(rng, 0.8, 1.2);
}

// Separable profile u_i * v_j with u, v ~ Uniform[0.9, 1.1]: amplitudes stay
// near 1 but the rectangle contributes exactly one unit of matrix rank, which
// keeps each folded source map low-rank by construction.
void fill_rect_separable(Tensor& vol, const Rect& rc, std::mt19937_64& rng) {
  std::vector<double> u(rc.h), v(rc.w);
  for (auto& x : u) x = unif(rng, 0.9, 1.1);
  for (auto& x : v) x = unif(rng, 0.9, 1.1);
  for (std::size_t j = 0; j < rc.w; ++j)
    for (std::size_t i = 0; i < rc.h; ++i)
      vol_at(vol, rc.r0 + i, rc.c0 + j, rc.slab) = u[i] * v[j];
}

std::vector<char> support_of(const Tensor& vol) {
  std::vector<char> s(vol.size());
  const double* d = vol.data();
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = d[i] != 0.0 ? 1 : 0;
  return s;
}

void record_supports(DatasetLayout& layout, const std::vector<Tensor>& sources) {
  const std::size_t r = sources.size();
  std::vector<std::vector<char>> sup;
  sup.reserve(r);
  for (const auto& s : sources) sup.push_back(support_of(s));
  layout.active_counts.assign(r, 0);
  layout.shared_counts.assign(r, std::vector<std::size_t>(r, 0));
  for (std::size_t a = 0; a < r; ++a)
    for (std::size_t b = a; b < r; ++b) {
      std::size_t n = 0;
      for (std::size_t i = 0; i < sup[a].size(); ++i) n += (sup[a][i] && sup[b][i]) ? 1 : 0;
      layout.shared_counts[a][b] = layout.shared_counts[b][a] = n;
      if (a == b) layout.active_counts[a] = n;
    }
}

std::vector<std::array<std::size_t, 5>> rects_meta(const std::vector<Rect>& rects) {
  std::vector<std::array<std::size_t, 5>> out;
  out.reserve(rects.size());
  for (const auto& rc : rects) out.push_back({rc.r0, rc.c0, rc.h, rc.w, rc.slab});
  return out;
}

// Signal = lowrank_outer_full(folded sources, B, C); observed = signal + noise
// elementwise, so the construction identity holds bitwise.
SyntheticDataset assemble(std::vector<Tensor> sources, Matrix b, Matrix c, Tensor noise,
                          std::uint64_t seed, DatasetLayout layout) {
  const std::size_t fr = layout.fold_rows, fc = layout.fold_cols;
  const auto t = static_cast<std::size_t>(b.rows());
  const auto s = static_cast<std::size_t>(c.rows());
  std::vector<Matrix> slabs;
  slabs.reserve(sources.size());
  for (const auto& v : sources)
    slabs.emplace_back(Eigen::Map<const Matrix>(v.data(), fr, fc));
  Tensor signal({fr, fc, t, s});
  kernels::lowrank_outer_full(slabs, b, &c, signal);

  SyntheticDataset ds;
  ds.observed = Tensor({fr, fc, t, s});
  const std::size_t n = signal.size();
  for (std::size_t i = 0; i < n; ++i) ds.observed.data()[i] = signal.data()[i] + noise.data()[i];
  ds.snr = snr_of(signal, noise);
  ds.sources = std::move(sources);
  ds.B_true = std::move(b);
  ds.C_true = std::move(c);
  ds.noise = std::move(noise);
  ds.observed_vec = ds.observed.reshaped({fr * fc, t, s});
  ds.seed = seed;
  record_supports(layout, ds.sources);
  ds.layout = std::move(layout);
  return ds;
}

Tensor white_noise(std::vector<std::size_t> shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& x : t.span()) x = g(rng);
  return t;
}

Vector normalized_course(Vector v) {
  const double m = v.cwiseAbs().maxCoeff();
  if (m > 0.0) v /= m;
  return v;
}

// --- elliptic slab masks ----------------------------------------------------

std::size_t ellipse_count(std::size_t nx, std::size_t ny, double a, double b) {
  const double cx = (static_cast<double>(nx) - 1.0) / 2.0;
  const double cy = (static_cast<double>(ny) - 1.0) / 2.0;
  std::size_t n = 0;
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) {
      const double dx = (static_cast<double>(i) - cx) / a;
      const double dy = (static_cast<double>(j) - cy) / b;
      if (dx * dx + dy * dy <= 1.0) ++n;
    }
  return n;
}

std::vector<char> ellipse_mask(std::size_t nx, std::size_t ny, double a, double b) {
  const double cx = (static_cast<double>(nx) - 1.0) / 2.0;
  const double cy = (static_cast<double>(ny) - 1.0) / 2.0;
  std::vector<char> m(nx * ny, 0);
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) {
      const double dx = (static_cast<double>(i) - cx) / a;
      const double dy = (static_cast<double>(j) - cy) / b;
      m[i + nx * j] = (dx * dx + dy * dy <= 1.0) ? 1 : 0;
    }
  return m;
}

// Bisect the ellipse scale until the voxel count lands within rel_tol of the
// target. Counts are monotone in the scale, so this terminates whenever the
// grid is fine enough to quantize the band.
double tune_ellipse_scale(std::size_t nx, std::size_t ny, double a0, double b0,
                          std::size_t target, double rel_tol) {
  double lo = 0.05, hi = 1.6;
  for (int iter = 0; iter < 64; ++iter) {
    const double mid = 0.5 * (lo + hi);
    const std::size_t n = ellipse_count(nx, ny, a0 * mid, b0 * mid);
    const double err = static_cast<double>(n) - static_cast<double>(target);
    if (std::abs(err) <= rel_tol * static_cast<double>(target)) return mid;
    if (n < target)
      lo = mid;
    else
      hi = mid;
  }
  throw ArgumentError("gen_multislice: cannot match the slab mask voxel count at this scale");
}

void require_rect_in_mask(const Rect& rc, const std::vector<std::vector<char>>& masks,
                          std::size_t nx, const char* who) {
  for (std::size_t j = 0; j < rc.w; ++j)
    for (std::size_t i = 0; i < rc.h; ++i)
      if (!masks[rc.slab][(rc.r0 + i) + nx * (rc.c0 + j)])
        throw ArgumentError(std::string(who) +
                            ": an active rectangle leaves its slab mask; geometry too small");
}

}  // namespace

// --- haemodynamic response ---------------------------------------------------

Vector hrf(const HrfSpec& spec, std::size_t length) {
  if (length == 0) throw ArgumentError("hrf: length must be at least 1");
  if (!(spec.tr > 0.0) || !(spec.peak_delay > 0.0) || !(spec.undershoot_delay > 0.0))
    throw ArgumentError("hrf: tr and delays must be positive");
  if (!(spec.undershoot_ratio > 0.0) || !(spec.undershoot_ratio < 1.0))
    throw ArgumentError("hrf: undershoot ratio must lie in (0, 1)");
  Vector h(length);
  for (std::size_t i = 0; i < length; ++i) {
    const double t = static_cast<double>(i) * spec.tr;
    const double peak =
        std::pow(t / spec.peak_delay, spec.peak_delay) * std::exp(spec.peak_delay - t);
    const double dip = std::pow(t / spec.undershoot_delay, spec.undershoot_delay) *
                       std::exp(spec.undershoot_delay - t);
    h[static_cast<Eigen::Index>(i)] = peak - spec.undershoot_ratio * dip;
  }
  const double m = h.maxCoeff();
  if (m > 0.0) h /= m;
  return h;
}

Vector hrf_convolve(const Vector& stimulus, const HrfSpec& spec) {
  const auto n = static_cast<std::size_t>(stimulus.size());
  if (n == 0) return Vector();
  const Vector h = hrf(spec, n);
  Vector out = Vector::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t t = 0; t < n; ++t) {
    double acc = 0.0;
    for (std::size_t u = 0; u <= t; ++u)
      acc += stimulus[static_cast<Eigen::Index>(u)] * h[static_cast<Eigen::Index>(t - u)];
    out[static_cast<Eigen::Index>(t)] = acc;
  }
  return out;
}

// --- SNR ----------------------------------------------------------------------

double snr_of(const Tensor& signal, const Tensor& noise) {
  if (!signal.same_shape(noise)) throw ArgumentError("snr_of: signal/noise shape mismatch");
  const double nn = frobenius_norm(noise);
  if (nn == 0.0) return std::numeric_limits<double>::infinity();
  return frobenius_norm(signal) / nn;
}

Tensor scale_noise_to_snr(const Tensor& signal, const Tensor& noise, double target) {
  if (!signal.same_shape(noise))
    throw ArgumentError("scale_noise_to_snr: signal/noise shape mismatch");
  if (!std::isfinite(target) || !(target > 0.0))
    throw ArgumentError("scale_noise_to_snr: target must be positive and finite");
  const double sn = frobenius_norm(signal);
  const double nn = frobenius_norm(noise);
  if (sn == 0.0 || nn == 0.0)
    throw ArgumentError("scale_noise_to_snr: zero-norm signal or noise");
  const double k = sn / (target * nn);
  Tensor out = noise;
  for (auto& x : out.span()) x *= k;
  return out;
}

SyntheticDataset with_target_snr(const SyntheticDataset& ds, double target) {
  if (!(target > 0.0)) throw ArgumentError("with_target_snr: target must be positive");
  const auto& sh = ds.observed.shape();
  Tensor signal(sh);
  const std::size_t n = ds.observed.size();
  for (std::size_t i = 0; i < n; ++i)
    signal.data()[i] = ds.observed.data()[i] - ds.noise.data()[i];

  SyntheticDataset out = ds;
  if (std::isinf(target)) {
    out.noise = Tensor(sh);  // zeros: the noiseless acquisition
    out.observed = std::move(signal);
    out.snr = std::numeric_limits<double>::infinity();
  } else {
    out.noise = scale_noise_to_snr(signal, ds.noise, target);
    out.observed = Tensor(sh);
    for (std::size_t i = 0; i < n; ++i)
      out.observed.data()[i] = signal.data()[i] + out.noise.data()[i];
    out.snr = snr_of(signal, out.noise);
  }
  out.observed_vec = out.observed.reshaped({sh[0] * sh[1], sh[2], sh[3]});
  return out;
}

// --- perception study ----------------------------------------------------------

SyntheticDataset gen_perception(std::uint64_t seed, double scale) {
  require_scale(scale, "gen_perception");
  const std::size_t nx = scaled_dim(60, scale);
  const std::size_t ny = scaled_dim(50, scale);
  const std::size_t tlen = 180, subjects = 3;

  // Sources 2 and 3 are congruent rectangles shifted by half their (even)
  // width, so they share exactly half of each one's active voxels.
  const std::size_t half = scaled_dim(5, scale);
  const Rect r1{scaled_pos(8, scale), scaled_pos(6, scale), scaled_dim(5, scale),
                scaled_dim(10, scale)};
  const Rect r2{scaled_pos(30, scale), scaled_pos(12, scale), scaled_dim(6, scale), 2 * half};
  const Rect r3{r2.r0, r2.c0 + half, r2.h, r2.w};

  std::vector<Tensor> sources(3, Tensor({nx, ny}));
  std::mt19937_64 rng_maps = seeded_rng(seed, 0);
  for (const auto* rc : {&r1, &r2, &r3}) require_rect_fits(sources[0], *rc, "gen_perception");
  fill_rect_iid(sources[0], r1, rng_maps);
  fill_rect_iid(sources[1], r2, rng_maps);
  fill_rect_iid(sources[2], r3, rng_maps);

  const std::size_t active_union = r1.h * r1.w + r2.h * (r2.w + half);
  const double frac = static_cast<double>(active_union) / static_cast<double>(nx * ny);
  if (frac < 0.03 || frac > 0.06)
    throw ArgumentError("gen_perception: active fraction leaves [3%, 6%] at this scale");

  // 30 s on / 30 s off blocks with staggered phases.
  Matrix b(tlen, 3);
  const int phases[3] = {0, 10, 20};
  for (int r = 0; r < 3; ++r)
    for (std::size_t t = 0; t < tlen; ++t) {
      const int m = ((static_cast<int>(t) - phases[r]) % 60 + 60) % 60;
      b(static_cast<Eigen::Index>(t), r) = m < 30 ? 1.0 : 0.0;
    }

  // Subject activation levels, in units of the mean noise standard deviation
  // (exactly 1 for the unit white noise used here).
  Matrix c(3, 3);
  c << 3, 4, 5, 2, 3, 4, 2, 2, 3;

  std::mt19937_64 rng_noise = seeded_rng(seed, 1);
  Tensor noise = white_noise({nx, ny, tlen, subjects}, rng_noise);

  DatasetLayout layout;
  layout.variant = "perception";
  layout.scale = scale;
  layout.volume_shape = {nx, ny};
  layout.fold_rows = nx;
  layout.fold_cols = ny;
  layout.mask_voxels = nx * ny;
  layout.mask.assign(nx * ny, 1);
  layout.source_kinds = {"blobs-iid", "blobs-iid", "blobs-iid"};
  layout.course_kinds = {"block-30s-phase0", "block-30s-phase10", "block-30s-phase20"};
  layout.source_rects = {rects_meta({r1}), rects_meta({r2}), rects_meta({r3})};
  return assemble(std::move(sources), std::move(b), std::move(c), std::move(noise), seed,
                  std::move(layout));
}

// --- multislice datasets A and G -------------------------------------------------

SyntheticDataset gen_multislice(MultisliceVariant variant, std::uint64_t seed, double scale) {
  require_scale(scale, "gen_multislice");
  const std::size_t nx = scaled_dim(42, scale);
  const std::size_t ny = scaled_dim(30, scale);
  const std::size_t nslab = 3;
  const std::size_t tlen = 120, subjects = 3;
  const double area = scale * scale;

  const double mask_targets[3] = {962, 838, 689};
  std::vector<std::vector<char>> masks(nslab);
  std::vector<std::size_t> mask_counts(nslab);
  for (std::size_t k = 0; k < nslab; ++k) {
    const auto target =
        static_cast<std::size_t>(std::llround(mask_targets[k] * area));
    const double s = tune_ellipse_scale(nx, ny, static_cast<double>(nx) / 2.0,
                                        static_cast<double>(ny) / 2.0, target, 0.02);
    masks[k] = ellipse_mask(nx, ny, s * static_cast<double>(nx) / 2.0,
                            s * static_cast<double>(ny) / 2.0);
    mask_counts[k] = static_cast<std::size_t>(std::count(masks[k].begin(), masks[k].end(), 1));
  }

  const bool overlapped = variant == MultisliceVariant::G;
  std::vector<std::vector<Rect>> rects(3);
  if (!overlapped) {
    rects[0] = {Rect{scaled_pos(18, scale), scaled_pos(10, scale), scaled_dim(5, scale),
                     scaled_dim(9, scale), 0}};
    rects[1] = {Rect{scaled_pos(14, scale), scaled_pos(6, scale), scaled_dim(6, scale),
                     scaled_dim(10, scale), 1},
                Rect{scaled_pos(23, scale), scaled_pos(17, scale), scaled_dim(6, scale),
                     scaled_dim(5, scale), 1}};
  } else {
    // Sources 1 and 2 share an 8x8 patch of slab 1: 64 voxels, i.e. 51% of
    // source 1's 125 and 63% of source 2's 102 active voxels.
    const Rect one_main{scaled_pos(13, scale), scaled_pos(4, scale), scaled_dim(8, scale),
                        scaled_dim(10, scale), 1};
    const Rect one_side{scaled_pos(18, scale), scaled_pos(10, scale), scaled_dim(5, scale),
                        scaled_dim(9, scale), 0};
    const Rect two_main{one_main.r0, one_main.c0 + scaled_dim(2, scale), one_main.h,
                        scaled_dim(12, scale), 1};
    const Rect two_side{scaled_pos(25, scale), scaled_pos(12, scale), scaled_dim(1, scale),
                        scaled_dim(6, scale), 1};
    rects[0] = {one_main, one_side};
    rects[1] = {two_main, two_side};
  }
  rects[2] = {Rect{scaled_pos(18, scale), scaled_pos(10, scale), scaled_dim(6, scale),
                   scaled_dim(9, scale), 2}};

  std::vector<Tensor> sources(3, Tensor({nx, ny, nslab}));
  std::mt19937_64 rng_maps = seeded_rng(seed, 0);
  for (std::size_t r = 0; r < 3; ++r)
    for (const auto& rc : rects[r]) {
      require_rect_fits(sources[r], rc, "gen_multislice");
      require_rect_in_mask(rc, masks, nx, "gen_multislice");
      fill_rect_separable(sources[r], rc, rng_maps);
    }

  // Block, fixed-interval event, and random-interval event designs, each
  // convolved with the canonical response and peak-normalized.
  Matrix b(tlen, 3);
  {
    Vector stim1 = Vector::Zero(tlen), stim2 = Vector::Zero(tlen), stim3 = Vector::Zero(tlen);
    for (std::size_t t = 0; t < tlen; ++t)
      stim1[static_cast<Eigen::Index>(t)] = (t % 60) < 30 ? 1.0 : 0.0;
    for (std::size_t t = 10; t < tlen; t += 20) stim2[static_cast<Eigen::Index>(t)] = 1.0;
    std::mt19937_64 rng_events = seeded_rng(seed, 2);
    std::size_t t = 5 + static_cast<std::size_t>(unif(rng_events, 0.0, 8.0));
    while (t < tlen) {
      stim3[static_cast<Eigen::Index>(t)] = 1.0;
      t += 12 + static_cast<std::size_t>(unif(rng_events, 0.0, 16.0));
    }
    b.col(0) = normalized_course(hrf_convolve(stim1));
    b.col(1) = normalized_course(hrf_convolve(stim2));
    b.col(2) = normalized_course(hrf_convolve(stim3));
  }

  // Heteroscedastic noise: a smooth per-voxel variance field in [0.5, 1.5]
  // with a slab-dependent phase, standing in for recorded resting-state noise.
  // Recorded noise only exists inside the head, so voxels outside the
  // elliptic slab masks stay exactly zero.
  const std::size_t voxels = nx * ny * nslab;
  std::vector<double> noise_std(voxels);
  double mean_std = 0.0;
  std::size_t in_mask = 0;
  for (std::size_t k = 0; k < nslab; ++k)
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i) {
        const double variance =
            1.0 + 0.5 * std::sin(2.0 * kPi * (static_cast<double>(i) + 0.5) /
                                 static_cast<double>(nx)) *
                      std::cos(2.0 * kPi * (static_cast<double>(j) + 0.5) /
                                   static_cast<double>(ny) +
                               static_cast<double>(k) * kPi / 3.0);
        const std::size_t v = i + nx * (j + ny * k);
        if (masks[k][i + nx * j]) {
          noise_std[v] = std::sqrt(variance);
          mean_std += noise_std[v];
          ++in_mask;
        } else {
          noise_std[v] = 0.0;
        }
      }
  mean_std /= static_cast<double>(in_mask);

  std::mt19937_64 rng_noise = seeded_rng(seed, 1);
  Tensor noise({nx, ny * nslab, tlen, subjects});
  {
    std::normal_distribution<double> g(0.0, 1.0);
    double* d = noise.data();
    const std::size_t n = noise.size();
    for (std::size_t idx = 0; idx < n; ++idx) d[idx] = g(rng_noise) * noise_std[idx % voxels];
  }

  Matrix c(3, 3);
  c << 3, 4, 5, 2, 3, 4, 2, 2, 3;
  c *= mean_std;

  DatasetLayout layout;
  layout.variant = overlapped ? "multislice-g" : "multislice-a";
  layout.scale = scale;
  layout.volume_shape = {nx, ny, nslab};
  layout.fold_rows = nx;
  layout.fold_cols = ny * nslab;
  layout.mask_counts = mask_counts;
  layout.mask_voxels = mask_counts[0] + mask_counts[1] + mask_counts[2];
  layout.mask.assign(nx * ny * nslab, 0);
  for (std::size_t k = 0; k < nslab; ++k)
    for (std::size_t v = 0; v < nx * ny; ++v)
      layout.mask[v + nx * ny * k] = masks[k][v] ? 1 : 0;
  layout.source_kinds = {"blobs-separable", "blobs-separable", "blobs-separable"};
  layout.course_kinds = {"block-30s-hrf", "events-20s-hrf", "events-random-hrf"};
  layout.source_rects = {rects_meta(rects[0]), rects_meta(rects[1]), rects_meta(rects[2])};
  return assemble(std::move(sources), std::move(b), std::move(c), std::move(noise), seed,
                  std::move(layout));
}

// --- artifact study ----------------------------------------------------------------

SyntheticDataset gen_artifact_study(bool include_gaussian_source, std::uint64_t seed,
                                    double scale) {
  require_scale(scale, "gen_artifact_study");
  const std::size_t nx = scaled_dim(60, scale);
  const std::size_t ny = scaled_dim(60, scale);
  const std::size_t tlen = 120, subjects = 3;

  std::mt19937_64 rng_maps = seeded_rng(seed, 0);
  std::vector<Tensor> sources(8, Tensor({nx, ny}));
  std::vector<std::vector<Rect>> rects(8);
  std::vector<std::string> kinds = {"blobs-separable", "blobs-separable", "ripple-field",
                                    "gaussian-field", "blobs-separable", "blobs-separable",
                                    "clipped-smooth-field", "point-spikes"};

  // Sparse super-Gaussian blob maps (sources 1, 2, 5, 6).
  rects[0] = {Rect{scaled_pos(6, scale), scaled_pos(6, scale), scaled_dim(4, scale),
                   scaled_dim(4, scale)},
              Rect{scaled_pos(14, scale), scaled_pos(40, scale), scaled_dim(5, scale),
                   scaled_dim(3, scale)},
              Rect{scaled_pos(40, scale), scaled_pos(10, scale), scaled_dim(3, scale),
                   scaled_dim(5, scale)}};
  rects[1] = {Rect{scaled_pos(26, scale), scaled_pos(30, scale), scaled_dim(5, scale),
                   scaled_dim(4, scale)},
              Rect{scaled_pos(34, scale), scaled_pos(44, scale), scaled_dim(4, scale),
                   scaled_dim(4, scale)}};
  rects[4] = {Rect{scaled_pos(50, scale), scaled_pos(28, scale), scaled_dim(3, scale),
                   scaled_dim(4, scale)},
              Rect{scaled_pos(10, scale), scaled_pos(52, scale), scaled_dim(4, scale),
                   scaled_dim(3, scale)}};
  rects[5] = {Rect{scaled_pos(46, scale), scaled_pos(46, scale), scaled_dim(4, scale),
                   scaled_dim(5, scale)},
              Rect{scaled_pos(22, scale), scaled_pos(12, scale), scaled_dim(3, scale),
                   scaled_dim(3, scale)}};
  for (std::size_t r : {std::size_t{0}, std::size_t{1}, std::size_t{4}, std::size_t{5}})
    for (const auto& rc : rects[r]) {
      require_rect_fits(sources[r], rc, "gen_artifact_study");
      fill_rect_separable(sources[r], rc, rng_maps);
    }

  // Source 3: full-field diagonal ripple. Its value histogram follows the
  // arcsine law, i.e. strongly sub-Gaussian, while sin(ax+by) folds into a
  // rank-2 matrix.
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i)
      vol_at(sources[2], i, j, 0) =
          std::sin(2.0 * kPi * (2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(nx) +
                                3.0 * (static_cast<double>(j) + 0.5) / static_cast<double>(ny)));

  // Source 4: i.i.d. Gaussian full-field map (the designated weak source).
  {
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& x : sources[3].span()) x = g(rng_maps);
  }

  // Source 7: smoothed Gaussian field pushed through tanh. The soft clipping
  // piles mass near the extremes, giving negative excess kurtosis, and the
  // smoothing keeps it spatially broad with energy spread over many singular
  // values.
  {
    std::normal_distribution<double> g(0.0, 1.0);
    Matrix raw(nx, ny);
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i) raw(static_cast<Eigen::Index>(i),
                                               static_cast<Eigen::Index>(j)) = g(rng_maps);
    const std::size_t kw = std::max<std::size_t>(3, scaled_dim(7, scale) | 1);
    const auto half_k = static_cast<std::ptrdiff_t>(kw / 2);
    Matrix rowpass = Matrix::Zero(raw.rows(), raw.cols());
    for (std::ptrdiff_t j = 0; j < raw.cols(); ++j)
      for (std::ptrdiff_t i = 0; i < raw.rows(); ++i) {
        double acc = 0.0;
        for (std::ptrdiff_t o = -half_k; o <= half_k; ++o) {
          const std::ptrdiff_t ii = i + o;
          if (ii >= 0 && ii < raw.rows()) acc += raw(ii, j);
        }
        rowpass(i, j) = acc;
      }
    Matrix smooth = Matrix::Zero(raw.rows(), raw.cols());
    for (std::ptrdiff_t j = 0; j < raw.cols(); ++j)
      for (std::ptrdiff_t i = 0; i < raw.rows(); ++i) {
        double acc = 0.0;
        for (std::ptrdiff_t o = -half_k; o <= half_k; ++o) {
          const std::ptrdiff_t jj = j + o;
          if (jj >= 0 && jj < raw.cols()) acc += rowpass(i, jj);
        }
        smooth(i, j) = acc;
      }
    const double sd = std::sqrt(smooth.array().square().mean());
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i)
        vol_at(sources[6], i, j, 0) = std::tanh(1.8 * smooth(static_cast<Eigen::Index>(i),
                                                             static_cast<Eigen::Index>(j)) / sd);
  }

  // Source 8: point spikes on distinct rows and columns. With k spikes the
  // map is a scaled permutation-like matrix of exact rank k; k > 20 keeps it
  // beyond the reach of the low-rank term budget used for the other sources.
  {
    const std::size_t k =
        std::min({std::max<std::size_t>(21, scaled_dim(26, scale)), nx, ny});
    std::vector<std::size_t> rows(nx), cols(ny);
    for (std::size_t i = 0; i < nx; ++i) rows[i] = i;
    for (std::size_t j = 0; j < ny; ++j) cols[j] = j;
    for (std::size_t i = 0; i < k; ++i) {  // partial Fisher-Yates
      std::swap(rows[i], rows[std::uniform_int_distribution<std::size_t>(i, nx - 1)(rng_maps)]);
      std::swap(cols[i], cols[std::uniform_int_distribution<std::size_t>(i, ny - 1)(rng_maps)]);
    }
    rects[7].reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      vol_at(sources[7], rows[i], cols[i], 0) = unif(rng_maps, 0.8, 1.2);
      rects[7].push_back(Rect{rows[i], cols[i], 1, 1});
    }
  }

  // Per-source signal power: source 8 dominates, source 4 is the weakest.
  const double power[8] = {1.0, 1.0, 0.9, 0.5, 0.85, 0.95, 0.9, 2.5};
  for (std::size_t r = 0; r < 8; ++r) {
    const double fro = frobenius_norm(sources[r].span());
    if (fro == 0.0) throw ArgumentError("gen_artifact_study: empty source map");
    const double s = power[r] / fro;
    for (auto& x : sources[r].span()) x *= s;
  }

  // Time courses: task-locked designs are HRF-convolved; artifact courses are
  // drifts, oscillations, random fluctuation, and a spike train.
  Matrix b(tlen, 8);
  {
    Vector block = Vector::Zero(tlen), onsets = Vector::Zero(tlen), offsets = Vector::Zero(tlen);
    for (std::size_t t = 0; t < tlen; ++t)
      block[static_cast<Eigen::Index>(t)] = (t % 60) < 30 ? 1.0 : 0.0;
    for (std::size_t t = 0; t < tlen; t += 60) onsets[static_cast<Eigen::Index>(t)] = 1.0;
    for (std::size_t t = 30; t < tlen; t += 60) offsets[static_cast<Eigen::Index>(t)] = 1.0;
    b.col(0) = normalized_course(hrf_convolve(block));
    b.col(1) = normalized_course(hrf_convolve(onsets));
    b.col(5) = normalized_course(hrf_convolve(offsets));
    std::mt19937_64 rng_courses = seeded_rng(seed, 2);
    Vector drift(tlen), resp(tlen), slow(tlen), rnd(tlen), spikes = Vector::Zero(tlen);
    for (std::size_t t = 0; t < tlen; ++t) {
      const double x = static_cast<double>(t);
      drift[static_cast<Eigen::Index>(t)] = std::sin(2.0 * kPi * x / 120.0);
      resp[static_cast<Eigen::Index>(t)] = std::sin(2.0 * kPi * x / 11.0);
      slow[static_cast<Eigen::Index>(t)] = std::sin(2.0 * kPi * x / 80.0 + 1.0);
      rnd[static_cast<Eigen::Index>(t)] = unif(rng_courses, -1.0, 1.0);
    }
    std::uniform_int_distribution<std::size_t> spike_at(0, tlen - 1);
    for (int i = 0; i < 6; ++i)
      spikes[static_cast<Eigen::Index>(spike_at(rng_courses))] = (i % 2 == 0) ? 1.0 : -1.0;
    b.col(2) = normalized_course(drift);
    b.col(3) = normalized_course(rnd);
    b.col(4) = normalized_course(resp);
    b.col(6) = normalized_course(slow);
    b.col(7) = normalized_course(spikes);
  }

  std::mt19937_64 rng_subjects = seeded_rng(seed, 3);
  Matrix c(subjects, 8);
  for (Eigen::Index r = 0; r < c.cols(); ++r)
    for (Eigen::Index s = 0; s < c.rows(); ++s) c(s, r) = unif(rng_subjects, 0.8, 1.2);

  std::mt19937_64 rng_noise = seeded_rng(seed, 1);
  Tensor noise = white_noise({nx, ny, tlen, subjects}, rng_noise);

  std::vector<std::string> course_kinds = {"block-30s-hrf", "block-onsets-hrf", "drift-slow",
                                           "random-fluctuation", "oscillation-11s",
                                           "block-offsets-hrf", "oscillation-80s", "spike-train"};

  if (!include_gaussian_source) {
    sources.erase(sources.begin() + 3);
    rects.erase(rects.begin() + 3);
    kinds.erase(kinds.begin() + 3);
    course_kinds.erase(course_kinds.begin() + 3);
    Matrix b7(tlen, 7), c7(subjects, 7);
    b7 << b.leftCols(3), b.rightCols(4);
    c7 << c.leftCols(3), c.rightCols(4);
    b = std::move(b7);
    c = std::move(c7);
  }

  DatasetLayout layout;
  layout.variant = include_gaussian_source ? "artifact8" : "artifact7";
  layout.scale = scale;
  layout.volume_shape = {nx, ny};
  layout.fold_rows = nx;
  layout.fold_cols = ny;
  layout.mask_voxels = nx * ny;
  layout.mask.assign(nx * ny, 1);
  layout.source_kinds = std::move(kinds);
  layout.course_kinds = std::move(course_kinds);
  layout.source_rects.reserve(rects.size());
  for (const auto& rs : rects) layout.source_rects.push_back(rects_meta(rs));
  return assemble(std::move(sources), std::move(b), std::move(c), std::move(noise), seed,
                  std::move(layout));
}

// --- metadata sidecar -----------------------------------------------------------

std::string dataset_metadata_json(const SyntheticDataset& ds) {
  nlohmann::json j;
  const auto& lay = ds.layout;
  j["variant"] = lay.variant;
  j["seed"] = ds.seed;
  j["scale"] = lay.scale;
  if (std::isinf(ds.snr))
    j["snr"] = "inf";
  else
    j["snr"] = ds.snr;
  j["geometry"] = {{"volume_shape", lay.volume_shape},
                   {"fold", {lay.fold_rows, lay.fold_cols}},
                   {"time", ds.B_true.rows()},
                   {"subjects", ds.C_true.rows()},
                   {"mask_voxels", lay.mask_voxels},
                   {"mask_counts", lay.mask_counts}};
  nlohmann::json srcs = nlohmann::json::array();
  for (std::size_t r = 0; r < ds.sources.size(); ++r) {
    nlohmann::json s;
    s["kind"] = r < lay.source_kinds.size() ? lay.source_kinds[r] : "";
    s["time_course"] = r < lay.course_kinds.size() ? lay.course_kinds[r] : "";
    s["active_voxels"] = r < lay.active_counts.size() ? lay.active_counts[r] : 0;
    nlohmann::json rs = nlohmann::json::array();
    if (r < lay.source_rects.size())
      for (const auto& rc : lay.source_rects[r])
        rs.push_back({rc[0], rc[1], rc[2], rc[3], rc[4]});
    s["rects"] = std::move(rs);
    srcs.push_back(std::move(s));
  }
  j["sources"] = std::move(srcs);
  j["shared_counts"] = lay.shared_counts;
  return j.dump(2);
}

}  // namespace mlbss
