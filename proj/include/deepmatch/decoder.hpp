#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "deepmatch/parallel.hpp"
#include "deepmatch/pyramid.hpp"
#include "deepmatch/score_map.hpp"

namespace dm {

/// Coarse-to-fine stack. q[L] is seeded with s[L]; each round disaggregates
/// q[l+1] into q_half[l] and unpools that through the forward switches, adding
/// s[l]. Routes record, per output cell, which source won each max so the
/// backward pass (and route-replay checks) can retrace the computation.
struct DecodeState {
  std::vector<ScoreMap> q;                     // Q_0..Q_L
  std::vector<ScoreMap> q_half;                // size L
  std::vector<std::vector<std::int8_t>> disagg_route;   // per q_half cell: corner 0..3, -1 none
  std::vector<std::vector<std::int32_t>> unpool_route;  // per q[l] cell: pooled k index, -1 none
  ForwardHazards hazards;
};

/// Scatter step reversing aggregation: each cell takes the max over its (up
/// to four) coarse parents, reading q_next at i - shift_c with the
/// displacement index unshifted. Cells with no in-grid parent carry no score.
inline ScoreMap disaggregate(const ScoreMap& q_next, const LevelGeometry& geom,
                             std::vector<std::int8_t>& route, int threads = 1,
                             double* min_gap = nullptr) {
  const auto shifts = aggregation_shifts(geom);
  ScoreMap out(q_next.rows, q_next.cols, q_next.range, geom.level, true, kNoScore);
  route.assign(out.data.size(), -1);
  const int KK = out.kextent() * out.kextent();
  std::vector<double> gaps(static_cast<std::size_t>(out.rows),
                           std::numeric_limits<double>::infinity());

  parallel_for(out.rows, threads, [&](int iy) {
    double local_gap = std::numeric_limits<double>::infinity();
    for (int ix = 0; ix < out.cols; ++ix) {
      const double* src[4] = {nullptr, nullptr, nullptr, nullptr};
      for (int c = 0; c < 4; ++c) {
        const int sy = iy - shifts[c][0], sx = ix - shifts[c][1];
        if (sy >= 0 && sy < out.rows && sx >= 0 && sx < out.cols)
          src[c] = q_next.slice(sy, sx);
      }
      double* dst = out.slice(iy, ix);
      std::int8_t* rt = route.data() + (static_cast<std::size_t>(iy) * out.cols + ix) * KK;
      for (int k = 0; k < KK; ++k) {
        double best = kNoScore, second = kNoScore;
        int arg = -1;
        for (int c = 0; c < 4; ++c) {
          if (!src[c]) continue;
          const double v = src[c][k];
          if (no_score(v)) continue;
          if (v > best) {
            second = best;
            best = v;
            arg = c;
          } else if (v > second) {
            second = v;
          }
        }
        if (arg >= 0) {
          dst[k] = best;
          rt[k] = static_cast<std::int8_t>(arg);
          if (!no_score(second) && best != second)
            local_gap = std::min(local_gap, best - second);
        }
      }
    }
    gaps[static_cast<std::size_t>(iy)] = local_gap;
  });
  if (min_gap) {
    double m = std::numeric_limits<double>::infinity();
    for (double v : gaps) m = std::min(m, v);
    *min_gap = m;
  }
  return out;
}

/// Reverses max pooling: every fine cell k receives the max of the pooled
/// cells whose recorded switch points at k (no score when none does), then
/// s_l is added. No-score absorbs the addition. Routes hold the winning
/// pooled index per fine cell.
inline ScoreMap unpool(const ScoreMap& q_half, const PoolSwitches& switches,
                       const ScoreMap& s_l, std::vector<std::int32_t>& route,
                       int threads = 1, double* min_gap = nullptr) {
  if (q_half.rows != s_l.rows || q_half.cols != s_l.cols)
    throw std::invalid_argument("unpool: grid mismatch");
  if (switches.rows != s_l.rows || switches.cols != s_l.cols ||
      switches.in_extent != s_l.kextent() || switches.out_extent != q_half.kextent())
    throw std::invalid_argument("unpool: switch shape mismatch");

  ScoreMap out(s_l.rows, s_l.cols, s_l.range, s_l.level, false, kNoScore);
  route.assign(out.data.size(), -1);
  const int N = s_l.kextent();
  const int M = q_half.kextent();
  std::vector<double> gaps(static_cast<std::size_t>(out.rows),
                           std::numeric_limits<double>::infinity());

  parallel_for(out.rows, threads, [&](int iy) {
    double local_gap = std::numeric_limits<double>::infinity();
    std::vector<double> best(static_cast<std::size_t>(N) * N);
    for (int ix = 0; ix < out.cols; ++ix) {
      std::fill(best.begin(), best.end(), kNoScore);
      std::int32_t* rt = route.data() + (static_cast<std::size_t>(iy) * out.cols + ix) *
                                            out.cell_stride();
      const double* qs = q_half.slice(iy, ix);
      for (int ok = 0; ok < M * M; ++ok) {
        const std::int32_t k = switches.win[(static_cast<std::size_t>(iy) * out.cols + ix) *
                                                static_cast<std::size_t>(M) * M +
                                            ok];
        if (k < 0) continue;
        const double v = qs[ok];
        if (no_score(v)) continue;
        if (v > best[k]) {
          if (!no_score(best[k]))
            local_gap = std::min(local_gap, v - best[k]);
          best[k] = v;
          rt[k] = ok;
        } else if (v != best[k]) {
          local_gap = std::min(local_gap, best[k] - v);
        }
      }
      const double* ss = s_l.slice(iy, ix);
      double* dst = out.slice(iy, ix);
      for (int k = 0; k < N * N; ++k) {
        if (rt[k] < 0 || no_score(ss[k])) {
          dst[k] = kNoScore;
          rt[k] = -1;
        } else {
          dst[k] = ss[k] + best[k];
        }
      }
    }
    gaps[static_cast<std::size_t>(iy)] = local_gap;
  });
  if (min_gap) {
    double m = std::numeric_limits<double>::infinity();
    for (double v : gaps) m = std::min(m, v);
    *min_gap = m;
  }
  return out;
}

/// Runs the full coarse-to-fine pass over a built pyramid.
inline DecodeState decode(const PyramidState& pyr, int threads = 1) {
  const int L = pyr.levels();
  DecodeState st;
  st.q.resize(static_cast<std::size_t>(L) + 1);
  st.q_half.resize(static_cast<std::size_t>(L));
  st.disagg_route.resize(static_cast<std::size_t>(L));
  st.unpool_route.resize(static_cast<std::size_t>(L));
  st.q[static_cast<std::size_t>(L)] = pyr.s[static_cast<std::size_t>(L)];
  for (int l = L - 1; l >= 0; --l) {
    double gap = std::numeric_limits<double>::infinity();
    st.q_half[l] = disaggregate(st.q[l + 1], pyr.geoms[l], st.disagg_route[l], threads, &gap);
    st.hazards.disagg_gap = std::min(st.hazards.disagg_gap, gap);
    st.q[l] = unpool(st.q_half[l], pyr.switches[l], pyr.s[l], st.unpool_route[l], threads, &gap);
    st.hazards.unpool_gap = std::min(st.hazards.unpool_gap, gap);
  }
  return st;
}

/// Independent reference for decode: enumerates every corner path from every
/// top-level cell down through the recorded pooling switches, accumulating
/// the per-level scores, and keeps the best sum reaching each level-0 cell.
/// Exponential in the level count, so it refuses anything but small
/// instances.
inline ScoreMap decode_oracle(const PyramidState& pyr) {
  const int L = pyr.levels();
  const LevelGeometry& g0 = pyr.geoms[0];
  if (L > 3 || g0.grid_rows > 8 || g0.grid_cols > 8 || g0.range > 8)
    throw std::invalid_argument(
        "decode_oracle: instance too large (needs L <= 3, grid <= 8x8, R0 <= 8)");

  if (L == 0) return pyr.s[0];

  ScoreMap out(g0.grid_rows, g0.grid_cols, g0.range, 0, false, kNoScore);

  // Walks down from full-level cell (l+1, iy, ix, k) carrying the partial sum.
  struct Walker {
    const PyramidState& pyr;
    ScoreMap& out;

    void descend(int l, int iy, int ix, int k, double acc) const {
      const auto shifts = aggregation_shifts(pyr.geoms[l]);
      const ScoreMap& sl = pyr.s[l];
      const PoolSwitches& sw = pyr.switches[l];
      const int M = sw.out_extent;
      for (int c = 0; c < 4; ++c) {
        const int cy = iy + shifts[c][0], cx = ix + shifts[c][1];
        if (cy < 0 || cy >= sl.rows || cx < 0 || cx >= sl.cols) continue;
        const std::int32_t kf = sw.win[(static_cast<std::size_t>(cy) * sl.cols + cx) *
                                           static_cast<std::size_t>(M) * M +
                                       k];
        if (kf < 0) continue;
        const double val = sl.slice(cy, cx)[kf];
        const double sum = val + acc;
        if (l == 0) {
          double& cell = out.slice(cy, cx)[kf];
          if (no_score(cell) || sum > cell) cell = sum;
        } else {
          descend(l - 1, cy, cx, kf, sum);
        }
      }
    }
  };

  const ScoreMap& top = pyr.s[static_cast<std::size_t>(L)];
  const Walker w{pyr, out};
  const int KK = top.kextent() * top.kextent();
  for (int iy = 0; iy < top.rows; ++iy)
    for (int ix = 0; ix < top.cols; ++ix) {
      const double* slice = top.slice(iy, ix);
      for (int k = 0; k < KK; ++k) {
        if (no_score(slice[k])) continue;
        w.descend(L - 1, iy, ix, k, slice[k]);
      }
    }
  return out;
}

}  // namespace dm
