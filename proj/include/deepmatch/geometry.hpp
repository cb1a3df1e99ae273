#pragma once

#include <array>
#include <string>
#include <vector>

#include "deepmatch/errors.hpp"

namespace dm {

/// Discretization constants shared by every pyramid level.
///
/// The reference image is sampled on a quasi-dense grid with stride
/// `ref_stride` and offset `ref_offset`; displacements are sampled around each
/// grid point with stride `target_stride * 2^level` over an index range that
/// halves with each level. `agg_window` is the side (in pixels, at level 0) of
/// the square whose four corners are averaged by aggregation, and
/// `pool_halfwin` the half width (in pixels, at level 0) of the max-pooling
/// window over displacements.
struct GeometryParams {
  int levels = 6;         // number of pooling/aggregation rounds (L)
  int range0 = 80;        // displacement sample range at level 0 (R0)
  int ref_stride = 8;     // reference grid stride, pixels
  int ref_offset = 4;     // reference grid offset, pixels
  int target_stride = 1;  // displacement sample stride at level 0, pixels
  int agg_window = 8;     // aggregation square side, pixels
  int pool_halfwin = 1;   // pooling half window, pixels
};

/// Per-level geometry. Index conventions follow the sampling formulas
///   q = 2^l * target_stride * (k - 1 - R_l) + p,   k in {1..2R_l+1}^2
///   p = ref_stride * (i - 1 + grid_shift_l) + ref_offset,  i in {1..H}x{1..W}
/// with grid_shift_0 = 0 and, for l >= 1,
///   grid_shift = agg_window/(2*ref_stride) - ceil(agg_window/(2*ref_stride)).
struct LevelGeometry {
  int level = 0;
  int range = 0;  // R_l
  int ref_stride = 8;
  int ref_offset = 4;
  int target_stride = 1;
  int agg_window = 8;
  int pool_halfwin = 1;
  double grid_shift = 0.0;  // fractional reference-grid offset, in cells
  int grid_rows = 0;        // H_l (held constant across levels)
  int grid_cols = 0;        // W_l

  int kextent() const { return 2 * range + 1; }
  /// Displacement grid step in pixels at this level.
  int pixel_step() const { return (1 << level) * target_stride; }
};

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

/// R_{l+1} = ceil(R_l / 2).
inline int next_range(int r) {
  if (r < 1) throw ConfigError("next_range: range must be >= 1");
  return ceil_div(r, 2);
}

inline void validate(const GeometryParams& g) {
  auto fail = [](const std::string& m) { throw ConfigError("geometry: " + m); };
  if (g.levels < 0) fail("levels must be >= 0");
  if (g.range0 < 1) fail("range0 must be >= 1");
  if (g.ref_stride < 1 || g.target_stride < 1) fail("strides must be >= 1");
  if (g.ref_offset < 0) fail("ref_offset must be >= 0");
  if (g.agg_window < 1) fail("agg_window must be >= 1");
  if (g.pool_halfwin < 0) fail("pool_halfwin must be >= 0");
  if (g.pool_halfwin % g.target_stride != 0)
    fail("target_stride must divide pool_halfwin");
  if (g.agg_window % g.ref_stride != 0)
    fail("ref_stride must divide agg_window");
  if (g.ref_stride % g.target_stride != 0)
    fail("target_stride must divide ref_stride");
  if (g.levels >= 1 && g.agg_window % 2 != 0)
    fail("agg_window must be even so that shifted grids stay on pixel centers");
  if (g.target_stride > 1 && g.ref_offset % g.target_stride != 0)
    fail("target_stride must divide ref_offset");
}

/// Builds the geometry of levels 0..L for a reference image of the given
/// extent. The reference grid extent is fixed at level 0 and reused at every
/// level.
inline std::vector<LevelGeometry> make_levels(const GeometryParams& g,
                                              int image_rows, int image_cols) {
  validate(g);
  if (image_rows <= g.ref_offset || image_cols <= g.ref_offset)
    throw ConfigError("geometry: image smaller than the reference grid offset");
  const int rows = (image_rows - 1 - g.ref_offset) / g.ref_stride + 1;
  const int cols = (image_cols - 1 - g.ref_offset) / g.ref_stride + 1;

  // grid_shift for l >= 1; exact as a ratio of integers.
  const int half = ceil_div(g.agg_window, 2 * g.ref_stride);
  const double shift =
      static_cast<double>(g.agg_window) / (2.0 * g.ref_stride) - half;

  std::vector<LevelGeometry> out;
  out.reserve(static_cast<std::size_t>(g.levels) + 1);
  int r = g.range0;
  for (int l = 0; l <= g.levels; ++l) {
    LevelGeometry lg;
    lg.level = l;
    lg.range = r;
    lg.ref_stride = g.ref_stride;
    lg.ref_offset = g.ref_offset;
    lg.target_stride = g.target_stride;
    lg.agg_window = g.agg_window;
    lg.pool_halfwin = g.pool_halfwin;
    lg.grid_shift = (l == 0) ? 0.0 : shift;
    lg.grid_rows = rows;
    lg.grid_cols = cols;
    out.push_back(lg);
    if (l < g.levels) r = next_range(r);
  }
  return out;
}

/// Maps a 1-based displacement index pair k to the target pixel q for the
/// reference pixel p: q = 2^l * target_stride * (k - 1 - R_l) + p.
inline std::array<int, 2> target_coord(const LevelGeometry& geom,
                                       std::array<int, 2> k,
                                       std::array<int, 2> p) {
  const int n = geom.kextent();
  for (int c = 0; c < 2; ++c) {
    if (k[c] < 1 || k[c] > n)
      throw std::out_of_range("target_coord: displacement index out of range");
  }
  const int step = geom.pixel_step();
  return {step * (k[0] - 1 - geom.range) + p[0],
          step * (k[1] - 1 - geom.range) + p[1]};
}

/// Maps a 1-based reference grid index pair i to its pixel:
/// p = ref_stride * (i - 1 + grid_shift_l) + ref_offset. Integer under the
/// divisibility rules (agg_window even).
inline std::array<int, 2> ref_coord(const LevelGeometry& geom,
                                    std::array<int, 2> i) {
  if (i[0] < 1 || i[0] > geom.grid_rows || i[1] < 1 || i[1] > geom.grid_cols)
    throw std::out_of_range("ref_coord: grid index out of range");
  // ref_stride * grid_shift computed exactly in integers.
  int shift_px = 0;
  if (geom.level >= 1) {
    const int half = ceil_div(geom.agg_window, 2 * geom.ref_stride);
    shift_px = geom.agg_window / 2 - geom.ref_stride * half;
  }
  return {geom.ref_stride * (i[0] - 1) + shift_px + geom.ref_offset,
          geom.ref_stride * (i[1] - 1) + shift_px + geom.ref_offset};
}

/// Max-pooling parameters for the transition from range R_l to R_{l+1}:
/// window W = 1 + 2*pool_halfwin/target_stride, stride 2, and symmetric
/// padding P = pool_halfwin/target_stride + 2*R_{l+1} - R_l chosen so that an
/// input extent of 2*R_l+1 pools to exactly 2*R_{l+1}+1.
struct PoolParams {
  int window = 3;
  int stride = 2;
  int pad_lo = 0;
  int pad_hi = 0;
};

inline PoolParams pool_params(const LevelGeometry& geom) {
  const int eta = geom.pool_halfwin / geom.target_stride;
  const int r_next = next_range(geom.range);
  PoolParams p;
  p.window = 1 + 2 * eta;
  p.stride = 2;
  p.pad_lo = p.pad_hi = eta + 2 * r_next - geom.range;
  if (p.pad_lo < 0) throw ConfigError("pool_params: negative padding");
  // (2R+1 + 2P - W)/2 + 1 == 2R' + 1 by construction.
  return p;
}

/// The four corner sign vectors of aggregation, in fixed order.
inline constexpr std::array<std::array<int, 2>, 4> corner_signs() {
  return {{{-1, -1}, {-1, +1}, {+1, +1}, {+1, -1}}};
}

/// Reference-grid index offsets of the four slices averaged by the
/// aggregation step at this level: the coarse cell i gathers the pooled
/// slices at i + offset_c. For l >= 1 the offsets are 2^(l-1) *
/// (agg_window/ref_stride) * sign_c; at l = 0 the half-cell grid shift of
/// level 1 folds in and the offsets become
/// ceil(agg_window/(2*ref_stride)) + (agg_window/ref_stride)*(sign_c - 1)/2.
inline std::array<std::array<int, 2>, 4> aggregation_shifts(
    const LevelGeometry& geom) {
  if (geom.agg_window % geom.ref_stride != 0)
    throw ConfigError("aggregation_shifts: ref_stride must divide agg_window");
  const int ratio = geom.agg_window / geom.ref_stride;
  std::array<std::array<int, 2>, 4> out{};
  const auto signs = corner_signs();
  if (geom.level >= 1) {
    const int s = (1 << (geom.level - 1)) * ratio;
    for (int c = 0; c < 4; ++c)
      out[c] = {s * signs[c][0], s * signs[c][1]};
  } else {
    const int half = ceil_div(geom.agg_window, 2 * geom.ref_stride);
    for (int c = 0; c < 4; ++c)
      out[c] = {half + ratio * (signs[c][0] - 1) / 2,
                half + ratio * (signs[c][1] - 1) / 2};
  }
  return out;
}

}  // namespace dm
