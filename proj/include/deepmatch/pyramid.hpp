#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "deepmatch/descriptors.hpp"
#include "deepmatch/geometry.hpp"
#include "deepmatch/parallel.hpp"
#include "deepmatch/score_map.hpp"

namespace dm {

/// Smallest winner-vs-runner-up margins seen while building (and decoding /
/// scoring) a pyramid. Finite-difference gradient checks consult these to
/// re-seed instances whose max operators sit on a tie.
struct ForwardHazards {
  double pool_gap = std::numeric_limits<double>::infinity();
  double disagg_gap = std::numeric_limits<double>::infinity();
  double unpool_gap = std::numeric_limits<double>::infinity();
  double rectify_margin = std::numeric_limits<double>::infinity();
  double hinge_margin = std::numeric_limits<double>::infinity();
  double prepower_floor = std::numeric_limits<double>::infinity();

  double worst() const {
    double w = pool_gap;
    w = std::min(w, disagg_gap);
    w = std::min(w, unpool_gap);
    w = std::min(w, rectify_margin);
    w = std::min(w, hinge_margin);
    return w;
  }
  void merge(const ForwardHazards& o) {
    pool_gap = std::min(pool_gap, o.pool_gap);
    disagg_gap = std::min(disagg_gap, o.disagg_gap);
    unpool_gap = std::min(unpool_gap, o.unpool_gap);
    rectify_margin = std::min(rectify_margin, o.rectify_margin);
    hinge_margin = std::min(hinge_margin, o.hinge_margin);
    prepower_floor = std::min(prepower_floor, o.prepower_floor);
  }
};

/// Full forward stack: score maps of every level and half level, pooling
/// switches, and the pre-exponent aggregation values the backward pass needs.
/// exponents[l] is the power applied by the aggregation step that produces
/// level l+1.
struct PyramidState {
  std::vector<LevelGeometry> geoms;      // levels 0..L
  std::vector<double> exponents;         // size L
  std::vector<ScoreMap> s;               // S_0..S_L
  std::vector<ScoreMap> s_half;          // size L, map l+1/2
  std::vector<PoolSwitches> switches;    // size L
  std::vector<std::vector<double>> prepower;  // size L, layout of s[l+1]
  ForwardHazards hazards;

  int levels() const { return static_cast<int>(geoms.size()) - 1; }
};

/// Rectified cosine similarity between the reference and target grids:
/// score(k|i) = max(0, <ref(i), tgt(q)>), with no-score where the displaced
/// point q leaves the target grid.
inline ScoreMap correlate(const DescriptorField& ref, const DescriptorField& tgt,
                          const LevelGeometry& g0, int threads = 1,
                          double* rectify_margin = nullptr) {
  if (ref.dim != tgt.dim)
    throw std::invalid_argument("correlate: descriptor dimensions differ");
  if (ref.rows != g0.grid_rows || ref.cols != g0.grid_cols)
    throw std::invalid_argument("correlate: reference grid does not match geometry");
  if (tgt.stride != g0.target_stride || tgt.offset != 0)
    throw std::invalid_argument("correlate: target grid does not match geometry");

  ScoreMap out(g0.grid_rows, g0.grid_cols, g0.range, 0, false, kNoScore);
  const int K = out.kextent();
  const int dim = ref.dim;
  std::vector<double> margins(static_cast<std::size_t>(g0.grid_rows),
                              std::numeric_limits<double>::infinity());

  parallel_for(g0.grid_rows, threads, [&](int iy) {
    double local_margin = std::numeric_limits<double>::infinity();
    for (int ix = 0; ix < g0.grid_cols; ++ix) {
      const int py = g0.ref_offset + g0.ref_stride * iy;
      const int px = g0.ref_offset + g0.ref_stride * ix;
      const double* rv = ref.cell(iy, ix);
      double* slice = out.slice(iy, ix);
      for (int ky = 0; ky < K; ++ky) {
        const int qy = py + g0.target_stride * (ky - g0.range);
        if (qy < 0 || qy > tgt.offset + tgt.stride * (tgt.rows - 1)) continue;
        for (int kx = 0; kx < K; ++kx) {
          const int qx = px + g0.target_stride * (kx - g0.range);
          if (qx < 0 || qx > tgt.offset + tgt.stride * (tgt.cols - 1)) continue;
          const double* tv = tgt.cell(qy / tgt.stride, qx / tgt.stride);
          double dot = 0;
          for (int d = 0; d < dim; ++d) dot += rv[d] * tv[d];
          slice[ky * K + kx] = dot > 0 ? dot : 0.0;
          if (dot != 0) local_margin = std::min(local_margin, std::abs(dot));
        }
      }
    }
    margins[static_cast<std::size_t>(iy)] = local_margin;
  });
  if (rectify_margin) {
    double m = std::numeric_limits<double>::infinity();
    for (double v : margins) m = std::min(m, v);
    *rectify_margin = m;
  }
  return out;
}

/// Windowed max over the displacement axes (window and symmetric padding from
/// pool_params, stride 2). Padding cells carry no score and never win; ties
/// go to the smallest index in raster order. `min_gap` reports the smallest
/// winner-vs-runner-up gap over windows with a positive winner.
inline ScoreMap max_pool(const ScoreMap& in, const LevelGeometry& geom,
                         PoolSwitches& switches, int threads = 1,
                         double* min_gap = nullptr) {
  if (in.pooled) throw std::invalid_argument("max_pool: input already pooled");
  const PoolParams pp = pool_params(geom);
  const int N = in.kextent();
  const int r_next = next_range(geom.range);
  const int Mext = 2 * r_next + 1;

  ScoreMap out(in.rows, in.cols, r_next, in.level, true, kNoScore);
  switches = PoolSwitches(in.rows, in.cols, N, Mext);
  std::vector<double> gaps(static_cast<std::size_t>(in.rows),
                           std::numeric_limits<double>::infinity());

  parallel_for(in.rows, threads, [&](int iy) {
    double local_gap = std::numeric_limits<double>::infinity();
    for (int ix = 0; ix < in.cols; ++ix) {
      const double* src = in.slice(iy, ix);
      double* dst = out.slice(iy, ix);
      for (int oy = 0; oy < Mext; ++oy) {
        const int sy = 2 * oy - pp.pad_lo;
        for (int ox = 0; ox < Mext; ++ox) {
          const int sx = 2 * ox - pp.pad_lo;
          double best = kNoScore;
          double second = kNoScore;
          int arg = -1;
          for (int wy = 0; wy < pp.window; ++wy) {
            const int ty = sy + wy;
            if (ty < 0 || ty >= N) continue;
            for (int wx = 0; wx < pp.window; ++wx) {
              const int tx = sx + wx;
              if (tx < 0 || tx >= N) continue;
              const double v = src[ty * N + tx];
              if (no_score(v)) continue;
              if (v > best) {
                second = best;
                best = v;
                arg = ty * N + tx;
              } else if (v > second) {
                second = v;
              }
            }
          }
          dst[oy * Mext + ox] = arg < 0 ? kNoScore : best;
          switches.at(iy, ix, oy, ox) = arg;
          // Exact-zero gaps are duplicated content (e.g. clamped border
          // patches); tied values move in lockstep and the raster-order
          // winner is stable, so only nonzero near-ties are hazards.
          if (arg >= 0 && !no_score(second) && best > 0 && best != second)
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

/// Averages the four corner-shifted slices of the pooled map (displacement
/// index unshifted), treating out-of-grid slices and no-score entries as 0
/// and always dividing by 4, then raises the mean to the given exponent.
/// The pre-exponent means are stored in `prepower` for the backward pass.
inline ScoreMap aggregate(const ScoreMap& half, const LevelGeometry& geom,
                          double exponent, std::vector<double>& prepower,
                          int threads = 1) {
  if (!half.pooled) throw std::invalid_argument("aggregate: expected a pooled map");
  if (!(exponent > 0)) throw ConfigError("aggregate: exponent must be > 0");
  const auto shifts = aggregation_shifts(geom);
  ScoreMap out(half.rows, half.cols, half.range, geom.level + 1, false, 0.0);
  prepower.assign(out.data.size(), 0.0);
  const int K = half.kextent();
  const std::size_t cell = out.cell_stride();

  parallel_for(half.rows, threads, [&](int iy) {
    for (int ix = 0; ix < half.cols; ++ix) {
      double* dst = out.slice(iy, ix);
      double* pre = prepower.data() + (static_cast<std::size_t>(iy) * half.cols + ix) * cell;
      const double* src[4] = {nullptr, nullptr, nullptr, nullptr};
      for (int c = 0; c < 4; ++c) {
        const int sy = iy + shifts[c][0], sx = ix + shifts[c][1];
        if (sy >= 0 && sy < half.rows && sx >= 0 && sx < half.cols)
          src[c] = half.slice(sy, sx);
      }
      for (int k = 0; k < K * K; ++k) {
        double sum = 0;
        for (int c = 0; c < 4; ++c) {
          if (!src[c]) continue;
          const double v = src[c][k];
          if (!no_score(v)) sum += v;
        }
        const double mean = 0.25 * sum;
        pre[k] = mean;
        dst[k] = std::pow(mean, exponent);
      }
    }
  });
  return out;
}

/// Runs level 0 correlation followed by `levels` rounds of pooling and
/// aggregation, retaining every intermediate.
inline PyramidState build_pyramid(const DescriptorField& ref,
                                  const DescriptorField& tgt,
                                  const std::vector<LevelGeometry>& geoms,
                                  const std::vector<double>& exponents,
                                  int threads = 1) {
  const int L = static_cast<int>(geoms.size()) - 1;
  if (L < 0) throw std::invalid_argument("build_pyramid: empty geometry");
  if (static_cast<int>(exponents.size()) != L)
    throw std::invalid_argument("build_pyramid: need one exponent per aggregation");

  PyramidState st;
  st.geoms = geoms;
  st.exponents = exponents;
  st.s.reserve(static_cast<std::size_t>(L) + 1);
  st.s.push_back(correlate(ref, tgt, geoms[0], threads, &st.hazards.rectify_margin));
  st.s_half.resize(static_cast<std::size_t>(L));
  st.switches.resize(static_cast<std::size_t>(L));
  st.prepower.resize(static_cast<std::size_t>(L));
  for (int l = 0; l < L; ++l) {
    double gap = std::numeric_limits<double>::infinity();
    st.s_half[l] = max_pool(st.s[l], geoms[l], st.switches[l], threads, &gap);
    st.hazards.pool_gap = std::min(st.hazards.pool_gap, gap);
    st.s.push_back(aggregate(st.s_half[l], geoms[l], exponents[l], st.prepower[l], threads));
    for (std::size_t i = 0; i < st.prepower[l].size(); ++i) {
      const double v = st.prepower[l][i];
      if (v > 0) st.hazards.prepower_floor = std::min(st.hazards.prepower_floor, v);
    }
  }
  return st;
}

/// Same stack but seeded from an existing level-0 map; used by tests and by
/// finite differencing of the exponents (which leave level 0 untouched).
inline PyramidState build_pyramid_from_scores(ScoreMap s0,
                                              const std::vector<LevelGeometry>& geoms,
                                              const std::vector<double>& exponents,
                                              int threads = 1) {
  const int L = static_cast<int>(geoms.size()) - 1;
  if (L < 0) throw std::invalid_argument("build_pyramid_from_scores: empty geometry");
  if (static_cast<int>(exponents.size()) != L)
    throw std::invalid_argument("build_pyramid_from_scores: need one exponent per aggregation");
  if (s0.rows != geoms[0].grid_rows || s0.cols != geoms[0].grid_cols ||
      s0.range != geoms[0].range)
    throw std::invalid_argument("build_pyramid_from_scores: map/geometry mismatch");

  PyramidState st;
  st.geoms = geoms;
  st.exponents = exponents;
  st.s.push_back(std::move(s0));
  st.s_half.resize(static_cast<std::size_t>(L));
  st.switches.resize(static_cast<std::size_t>(L));
  st.prepower.resize(static_cast<std::size_t>(L));
  for (int l = 0; l < L; ++l) {
    double gap = std::numeric_limits<double>::infinity();
    st.s_half[l] = max_pool(st.s[l], geoms[l], st.switches[l], threads, &gap);
    st.hazards.pool_gap = std::min(st.hazards.pool_gap, gap);
    st.s.push_back(aggregate(st.s_half[l], geoms[l], exponents[l], st.prepower[l], threads));
    for (std::size_t i = 0; i < st.prepower[l].size(); ++i) {
      const double v = st.prepower[l][i];
      if (v > 0) st.hazards.prepower_floor = std::min(st.hazards.prepower_floor, v);
    }
  }
  return st;
}

}  // namespace dm
