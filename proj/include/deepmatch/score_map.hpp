#pragma once

#include <cstdint>
#include <vector>

#include "deepmatch/geometry.hpp"

namespace dm {

/// Stored value meaning "no score" (-inf). Absorbing under max and addition;
/// never mixed into arithmetic directly, code branches on no_score() first.
inline constexpr double kNoScore = -1e30;

inline bool no_score(double v) { return v <= -1e29; }

/// 4D score array indexed by (reference grid cell, displacement index).
/// `range` is the R of the displacement axes (extent 2R+1 per axis); `pooled`
/// tags the intermediate maps that sit between a full level and the next
/// (their displacement range is already the next level's R while the
/// reference grid is still the current level's).
struct ScoreMap {
  int rows = 0, cols = 0;  // reference grid extent
  int range = 0;           // displacement index range R
  int level = 0;
  bool pooled = false;
  std::vector<double> data;

  ScoreMap() = default;
  ScoreMap(int rows_, int cols_, int range_, int level_, bool pooled_,
           double fill = 0.0)
      : rows(rows_), cols(cols_), range(range_), level(level_), pooled(pooled_),
        data(static_cast<std::size_t>(rows_) * cols_ * (2 * range_ + 1) *
                 (2 * range_ + 1),
             fill) {}

  int kextent() const { return 2 * range + 1; }
  std::size_t cell_stride() const {
    return static_cast<std::size_t>(kextent()) * kextent();
  }
  std::size_t index(int iy, int ix, int ky, int kx) const {
    return ((static_cast<std::size_t>(iy) * cols + ix) * kextent() + ky) *
               kextent() +
           kx;
  }
  double& at(int iy, int ix, int ky, int kx) { return data[index(iy, ix, ky, kx)]; }
  double at(int iy, int ix, int ky, int kx) const { return data[index(iy, ix, ky, kx)]; }

  double* slice(int iy, int ix) {
    return data.data() + (static_cast<std::size_t>(iy) * cols + ix) * cell_stride();
  }
  const double* slice(int iy, int ix) const {
    return data.data() + (static_cast<std::size_t>(iy) * cols + ix) * cell_stride();
  }

  bool same_shape(const ScoreMap& o) const {
    return rows == o.rows && cols == o.cols && range == o.range;
  }
};

/// Argmax positions recorded by max pooling: for every pooled cell, the
/// winning input displacement index (encoded ky * in_extent + kx), or -1 when
/// the whole window was padding / no-score.
struct PoolSwitches {
  int rows = 0, cols = 0;
  int in_extent = 0;   // displacement extent of the pooled input (2R_l+1)
  int out_extent = 0;  // displacement extent of the output (2R_{l+1}+1)
  std::vector<std::int32_t> win;

  PoolSwitches() = default;
  PoolSwitches(int rows_, int cols_, int in_ext, int out_ext)
      : rows(rows_), cols(cols_), in_extent(in_ext), out_extent(out_ext),
        win(static_cast<std::size_t>(rows_) * cols_ * out_ext * out_ext, -1) {}

  std::size_t index(int iy, int ix, int oky, int okx) const {
    return ((static_cast<std::size_t>(iy) * cols + ix) * out_extent + oky) *
               out_extent +
           okx;
  }
  std::int32_t& at(int iy, int ix, int oky, int okx) { return win[index(iy, ix, oky, okx)]; }
  std::int32_t at(int iy, int ix, int oky, int okx) const { return win[index(iy, ix, oky, okx)]; }
};

}  // namespace dm
