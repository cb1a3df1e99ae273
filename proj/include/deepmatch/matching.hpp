#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepmatch/errors.hpp"
#include "deepmatch/flow.hpp"
#include "deepmatch/geometry.hpp"
#include "deepmatch/score_map.hpp"

namespace dm {

/// One quasi-dense correspondence: reference pixel p, matched target pixel q,
/// the decoded score behind the match, and the reciprocal-verification flag.
struct Match {
  std::array<int, 2> p{0, 0};  // (y, x)
  std::array<int, 2> q{0, 0};
  double confidence = 0.0;
  bool verified = false;
  int cell_row = 0, cell_col = 0;  // reference grid cell (0-based)
  int k_index = 0;                 // winning displacement index ky*K+kx
};

struct MatchSet {
  std::vector<Match> items;
};

/// Per reference cell, the displacement with the highest decoded score (ties
/// go to the first index in raster order). Cells whose whole slice carries no
/// score are dropped.
inline MatchSet extract_matches(const ScoreMap& q0, const LevelGeometry& g0) {
  if (q0.rows != g0.grid_rows || q0.cols != g0.grid_cols || q0.range != g0.range)
    throw std::invalid_argument("extract_matches: map/geometry mismatch");
  MatchSet out;
  const int K = q0.kextent();
  for (int iy = 0; iy < q0.rows; ++iy) {
    for (int ix = 0; ix < q0.cols; ++ix) {
      const double* slice = q0.slice(iy, ix);
      double best = kNoScore;
      int arg = -1;
      for (int k = 0; k < K * K; ++k) {
        const double v = slice[k];
        if (no_score(v)) continue;
        if (v > best) {
          best = v;
          arg = k;
        }
      }
      if (arg < 0) continue;
      Match m;
      m.cell_row = iy;
      m.cell_col = ix;
      m.k_index = arg;
      const auto p = ref_coord(g0, {iy + 1, ix + 1});
      m.p = p;
      m.q = target_coord(g0, {arg / K + 1, arg % K + 1}, p);
      m.confidence = best;
      out.items.push_back(m);
    }
  }
  return out;
}

/// Reciprocal verification: a match p -> q survives iff no other reference
/// cell whose displacement range covers q scores q strictly higher. Ties
/// verify every participant.
inline void verify_matches(MatchSet& matches, const ScoreMap& q0,
                           const LevelGeometry& g0) {
  const int K = q0.kextent();
  const int step = g0.pixel_step();
  for (Match& m : matches.items) {
    bool ok = true;
    // Reference cells within reach of q: |q - p'| <= range * step per axis.
    const int reach = g0.range * step;
    for (int iy = 0; iy < q0.rows && ok; ++iy) {
      const int py = g0.ref_offset + g0.ref_stride * iy;
      if (std::abs(m.q[0] - py) > reach) continue;
      if ((m.q[0] - py) % step != 0) continue;
      const int ky = (m.q[0] - py) / step + g0.range;
      for (int ix = 0; ix < q0.cols; ++ix) {
        if (iy == m.cell_row && ix == m.cell_col) continue;
        const int px = g0.ref_offset + g0.ref_stride * ix;
        if (std::abs(m.q[1] - px) > reach) continue;
        if ((m.q[1] - px) % step != 0) continue;
        const int kx = (m.q[1] - px) / step + g0.range;
        const double v = q0.at(iy, ix, ky, kx);
        if (!no_score(v) && v > m.confidence) {
          ok = false;
          break;
        }
      }
    }
    m.verified = ok;
  }
}

/// Propagates verified matches to every pixel: each pixel adopts the
/// displacement of the most confident verified match within the given
/// L-infinity radius (ties: nearer match, then raster order of p). Pixels
/// with no match in range stay invalid.
inline FlowField densify(const MatchSet& matches, int width, int height,
                         int radius = 8) {
  FlowField out(width, height);
  struct Pick {
    double conf = -std::numeric_limits<double>::infinity();
    int dist = std::numeric_limits<int>::max();
    const Match* m = nullptr;
  };
  std::vector<Pick> picks(static_cast<std::size_t>(width) * height);
  for (const Match& m : matches.items) {
    if (!m.verified) continue;
    for (int y = std::max(0, m.p[0] - radius); y <= std::min(height - 1, m.p[0] + radius); ++y) {
      for (int x = std::max(0, m.p[1] - radius); x <= std::min(width - 1, m.p[1] + radius); ++x) {
        const int dist = std::max(std::abs(y - m.p[0]), std::abs(x - m.p[1]));
        Pick& pk = picks[static_cast<std::size_t>(y) * width + x];
        // Matches arrive in raster order of p, so strict comparisons keep the
        // first of equal candidates.
        if (m.confidence > pk.conf ||
            (m.confidence == pk.conf && dist < pk.dist)) {
          pk.conf = m.confidence;
          pk.dist = dist;
          pk.m = &m;
        }
      }
    }
  }
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const Pick& pk = picks[static_cast<std::size_t>(y) * width + x];
      if (!pk.m) continue;
      out.set(y, x, pk.m->q[1] - pk.m->p[1], pk.m->q[0] - pk.m->p[0]);
    }
  return out;
}

/// Fraction of ground-truth-valid pixels whose estimated displacement lies
/// within T pixels (L2). Pixels the estimate leaves invalid count as wrong.
inline double accuracy_at(const FlowField& est, const FlowField& gt, double T) {
  if (est.width != gt.width || est.height != gt.height)
    throw std::invalid_argument("accuracy_at: extent mismatch");
  std::size_t total = 0, good = 0;
  for (std::size_t i = 0; i < gt.valid.size(); ++i) {
    if (!gt.valid[i]) continue;
    ++total;
    if (!est.valid[i]) continue;
    const double dy = est.v[i] - gt.v[i], dx = est.u[i] - gt.u[i];
    if (std::hypot(dx, dy) <= T) ++good;
  }
  if (total == 0) throw std::invalid_argument("accuracy_at: empty evaluation set");
  return static_cast<double>(good) / static_cast<double>(total);
}

/// Mean L2 endpoint error over the masked pixels where both fields are valid.
inline double endpoint_error(const FlowField& est, const FlowField& gt,
                             const std::vector<std::uint8_t>& mask) {
  if (est.width != gt.width || est.height != gt.height)
    throw std::invalid_argument("endpoint_error: extent mismatch");
  if (mask.size() != gt.valid.size())
    throw std::invalid_argument("endpoint_error: mask extent mismatch");
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i] || !gt.valid[i] || !est.valid[i]) continue;
    const double dy = est.v[i] - gt.v[i], dx = est.u[i] - gt.u[i];
    sum += std::hypot(dx, dy);
    ++n;
  }
  if (n == 0) throw std::invalid_argument("endpoint_error: empty mask");
  return sum / static_cast<double>(n);
}

/// Mask of every pixel (EPE over the whole valid field).
inline std::vector<std::uint8_t> mask_all(const FlowField& f) {
  return std::vector<std::uint8_t>(f.valid.size(), 1);
}

/// Mask restricted to the reference pixels of (verified) matches.
inline std::vector<std::uint8_t> mask_at_matches(const MatchSet& matches,
                                                 int width, int height,
                                                 bool verified_only = true) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(width) * height, 0);
  for (const Match& m : matches.items) {
    if (verified_only && !m.verified) continue;
    if (m.p[0] >= 0 && m.p[0] < height && m.p[1] >= 0 && m.p[1] < width)
      mask[static_cast<std::size_t>(m.p[0]) * width + m.p[1]] = 1;
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Text match lists, one match per line:
//   p_x p_y q_x q_y confidence verified
// ---------------------------------------------------------------------------

inline void write_matches(std::ostream& out, const MatchSet& matches) {
  out.precision(17);
  for (const Match& m : matches.items)
    out << m.p[1] << " " << m.p[0] << " " << m.q[1] << " " << m.q[0] << " "
        << m.confidence << " " << (m.verified ? 1 : 0) << "\n";
}

inline MatchSet read_matches(std::istream& in) {
  MatchSet out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    Match m;
    int verified = 0;
    if (!(is >> m.p[1] >> m.p[0] >> m.q[1] >> m.q[0] >> m.confidence >> verified))
      throw IoError("matches: malformed line '" + line + "'");
    std::string rest;
    if (is >> rest) throw IoError("matches: trailing tokens on line '" + line + "'");
    m.verified = verified != 0;
    out.items.push_back(m);
  }
  return out;
}

}  // namespace dm
