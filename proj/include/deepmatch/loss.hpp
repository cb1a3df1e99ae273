#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "deepmatch/flow.hpp"
#include "deepmatch/geometry.hpp"
#include "deepmatch/score_map.hpp"

namespace dm {

/// exp(-|q - q_true|^2 / (2 sigma^2)); the smoothed indicator that shapes the
/// hinge margin.
inline double gaussian_margin(std::array<double, 2> q, std::array<double, 2> q_true,
                              double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("gaussian_margin: sigma must be > 0");
  const double dy = q[0] - q_true[0], dx = q[1] - q_true[1];
  return std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
}

/// Ground truth snapped onto a level's displacement grid: per reference cell
/// the nearest displacement index (or -1 where flow is missing or out of
/// range), plus the margin bandwidth.
struct GroundTruthField {
  int rows = 0, cols = 0;
  int range = 0;  // displacement range of the attachment level
  std::vector<std::int32_t> k_true;  // ky * (2R+1) + kx, or -1
  double sigma = 8.0;

  std::int32_t at(int iy, int ix) const {
    return k_true[static_cast<std::size_t>(iy) * cols + ix];
  }
};

/// Snaps a dense flow field to the displacement grid of `geom`. Cells whose
/// reference pixel has no valid flow, or whose true displacement leaves the
/// scoreable range, are marked invalid.
inline GroundTruthField snap_ground_truth(const FlowField& flow,
                                          const LevelGeometry& geom,
                                          double sigma) {
  GroundTruthField gt;
  gt.rows = geom.grid_rows;
  gt.cols = geom.grid_cols;
  gt.range = geom.range;
  gt.sigma = sigma;
  gt.k_true.assign(static_cast<std::size_t>(gt.rows) * gt.cols, -1);
  const int K = geom.kextent();
  const double step = geom.pixel_step();
  for (int iy = 0; iy < gt.rows; ++iy) {
    for (int ix = 0; ix < gt.cols; ++ix) {
      const auto p = ref_coord(geom, {iy + 1, ix + 1});
      if (!flow.in_bounds(p[0], p[1]) || !flow.is_valid(p[0], p[1])) continue;
      const std::size_t fi = flow.idx(p[0], p[1]);
      const long ky = std::lround(flow.v[fi] / step) + geom.range;
      const long kx = std::lround(flow.u[fi] / step) + geom.range;
      if (ky < 0 || ky >= K || kx < 0 || kx >= K) continue;
      gt.k_true[static_cast<std::size_t>(iy) * gt.cols + ix] =
          static_cast<std::int32_t>(ky * K + kx);
    }
  }
  return gt;
}

struct LossResult {
  double loss = 0.0;
  std::vector<double> d_score;  // same layout as the scored map
  double min_hinge_margin = std::numeric_limits<double>::infinity();
};

/// Structured hinge over all displacements of every valid cell:
///   sum_k max{0, 1 - g_sigma(q_k - q_true) + S(k|i) - S(k*|i)}.
/// The margin distance is measured between grid points, so a map equal to
/// the smoothed indicator scores exactly zero. Active terms contribute +1 at
/// their own cell and -1 at the true cell of the subgradient; no-score cells
/// and invalid cells are skipped.
inline LossResult structured_loss(const ScoreMap& S, const GroundTruthField& gt,
                                  const LevelGeometry& geom) {
  if (S.rows != gt.rows || S.cols != gt.cols || S.range != gt.range)
    throw std::invalid_argument("structured_loss: map/ground-truth geometry mismatch");
  LossResult res;
  res.d_score.assign(S.data.size(), 0.0);
  const int K = S.kextent();
  const double step = geom.pixel_step();
  for (int iy = 0; iy < S.rows; ++iy) {
    for (int ix = 0; ix < S.cols; ++ix) {
      const std::int32_t kt = gt.at(iy, ix);
      if (kt < 0) continue;
      const double* slice = S.slice(iy, ix);
      if (no_score(slice[kt])) continue;
      const double s_true = slice[kt];
      const int ty = kt / K, tx = kt % K;
      double* ds = res.d_score.data() +
                   (static_cast<std::size_t>(iy) * S.cols + ix) * S.cell_stride();
      int active = 0;
      for (int k = 0; k < K * K; ++k) {
        const double v = slice[k];
        if (no_score(v)) continue;
        const double dy = step * ((k / K) - ty);
        const double dx = step * ((k % K) - tx);
        const double g = std::exp(-(dy * dy + dx * dx) / (2.0 * gt.sigma * gt.sigma));
        const double arg = 1.0 - g + v - s_true;
        if (arg != 0.0)
          res.min_hinge_margin = std::min(res.min_hinge_margin, std::abs(arg));
        if (arg > 0) {
          res.loss += arg;
          ds[k] += 1.0;
          ++active;
        }
      }
      ds[kt] -= active;
    }
  }
  return res;
}

}  // namespace dm
