#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "deepmatch/decoder.hpp"
#include "deepmatch/io.hpp"
#include "deepmatch/selftest.hpp"

using namespace dm;

namespace {

std::vector<LevelGeometry> small_geoms(int levels, int range0, int grid) {
  GeometryParams gp;
  gp.levels = levels;
  gp.range0 = range0;
  const int image = gp.ref_offset + gp.ref_stride * (grid - 1) + 1;
  return make_levels(gp, image, image);
}

}  // namespace

TEST_CASE("disaggregation copies a constant wherever any parent exists") {
  const auto geoms = small_geoms(1, 2, 4);
  ScoreMap up(4, 4, 1, 1, false, 0.6);
  std::vector<std::int8_t> route;
  const ScoreMap half = disaggregate(up, geoms[0], route);
  for (double v : half.data) CHECK(v == 0.6);  // level-0 shifts keep >= 1 parent
}

TEST_CASE("disaggregation scatters a single cell to its children only") {
  const auto geoms = small_geoms(1, 1, 3);
  ScoreMap up(3, 3, 1, 1, false, kNoScore);
  const int K = up.kextent();
  up.at(1, 1, 0, 2) = 0.9;
  std::vector<std::int8_t> route;
  const ScoreMap half = disaggregate(up, geoms[0], route);
  // Level-0 shifts {0,1}^2: children of parent (1,1) sit at (1,1)+shift.
  for (int iy = 0; iy < 3; ++iy)
    for (int ix = 0; ix < 3; ++ix)
      for (int k = 0; k < K * K; ++k) {
        const double v = half.at(iy, ix, k / K, k % K);
        const bool child = (iy == 1 || iy == 2) && (ix == 1 || ix == 2) && k == 2;
        if (child) CHECK(v == 0.9);
        else CHECK(no_score(v));
      }
}

TEST_CASE("disaggregation takes the max over parents and records the route") {
  const auto geoms = small_geoms(2, 2, 5);
  // Level-1 shifts are the corner signs; cell (2,2) reads parents at
  // (2,2) - sign_c. Give the four parents distinct values at k = 0.
  ScoreMap up(5, 5, 1, 2, false, kNoScore);
  const auto shifts = aggregation_shifts(geoms[1]);
  const double vals[4] = {0.2, 0.7, 0.1, 0.5};
  for (int c = 0; c < 4; ++c)
    up.at(2 - shifts[c][0], 2 - shifts[c][1], 0, 0) = vals[c];
  std::vector<std::int8_t> route;
  const ScoreMap half = disaggregate(up, geoms[1], route);
  CHECK(half.at(2, 2, 0, 0) == 0.7);
  CHECK(route[half.index(2, 2, 0, 0)] == 1);  // second source in corner order
}

TEST_CASE("unpooling follows the switches, infills with no-score, and adds the fine map") {
  const auto geoms = small_geoms(1, 2, 1);
  const LevelGeometry& g = geoms[0];
  ScoreMap s(1, 1, 2, 0, false, 0.0);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (auto& v : s.data) v = uni(rng);
  PoolSwitches sw;
  const ScoreMap pooled = max_pool(s, g, sw);

  ScoreMap q_half = pooled;  // any values on the pooled grid work
  for (auto& v : q_half.data)
    if (!no_score(v)) v = uni(rng);
  std::vector<std::int32_t> route;
  const ScoreMap q = unpool(q_half, sw, s, route);

  const int N = s.kextent(), M = pooled.kextent();
  for (int k = 0; k < N * N; ++k) {
    // Reference: max over pooled cells whose switch points here, plus s.
    double best = kNoScore;
    for (int ok = 0; ok < M * M; ++ok)
      if (sw.at(0, 0, ok / M, ok % M) == k)
        best = std::max(best, q_half.at(0, 0, ok / M, ok % M));
    const double got = q.at(0, 0, k / N, k % N);
    if (no_score(best)) {
      CHECK(no_score(got));
      CHECK(route[static_cast<std::size_t>(k)] == -1);
    } else {
      CHECK(got == best + s.at(0, 0, k / N, k % N));
      CHECK(sw.at(0, 0, route[static_cast<std::size_t>(k)] / M,
                  route[static_cast<std::size_t>(k)] % M) == k);
    }
  }
}

TEST_CASE("unpooling hand case: values add after the max") {
  // One cell, range small enough to control: two pooled entries route to the
  // same fine index.
  ScoreMap s(1, 1, 1, 0, false, 0.1);
  ScoreMap q_half(1, 1, 1, 0, true, kNoScore);
  PoolSwitches sw(1, 1, 3, 3);
  q_half.at(0, 0, 0, 0) = 0.3;
  q_half.at(0, 0, 0, 1) = 0.6;
  sw.at(0, 0, 0, 0) = 4;  // both route to fine index (1,1)
  sw.at(0, 0, 0, 1) = 4;
  std::vector<std::int32_t> route;
  const ScoreMap q = unpool(q_half, sw, s, route);
  CHECK(q.at(0, 0, 1, 1) == Catch::Approx(0.7).margin(1e-15));
  CHECK(route[q.index(0, 0, 1, 1)] == 1);
  CHECK(no_score(q.at(0, 0, 0, 0)));

  // Single-route case.
  sw.at(0, 0, 0, 1) = -1;
  q_half.at(0, 0, 0, 0) = 0.3;
  ScoreMap s2(1, 1, 1, 0, false, 0.4);
  const ScoreMap q2 = unpool(q_half, sw, s2, route);
  CHECK(q2.at(0, 0, 1, 1) == Catch::Approx(0.7).margin(1e-15));
}

TEST_CASE("decode with zero levels returns the correlation map") {
  const auto geoms = small_geoms(0, 2, 3);
  ScoreMap s0(3, 3, 2, 0, false, 0.25);
  PyramidState pyr = build_pyramid_from_scores(s0, geoms, {});
  const DecodeState dec = decode(pyr);
  CHECK(dec.q.size() == 1);
  CHECK(dec.q[0].data == pyr.s[0].data);
  const ScoreMap oracle = decode_oracle(pyr);
  CHECK(oracle.data == pyr.s[0].data);
}

TEST_CASE("one-level hand instance: the best corner path wins") {
  // 2x2 grid, range 1. Uniform level-0 scores except a single hot cell, so
  // the best path for each level-0 cell can be traced by hand through the
  // switches.
  const auto geoms = small_geoms(1, 1, 2);
  ScoreMap s0(2, 2, 1, 0, false, 0.0);
  s0.at(0, 0, 1, 1) = 0.5;
  PyramidState pyr = build_pyramid_from_scores(s0, geoms, {1.0});
  const DecodeState dec = decode(pyr);

  // Pooling (window 3, pad 0): every pooled cell of grid (0,0) sees the hot
  // center, so the pooled map is 0.5 there and the switch points at (1,1).
  // Aggregation averages children {i, i+1}: top cell (0,0) mixes the hot
  // slice with up to three cold ones.
  // Manual path check for level-0 cell (0,0), k=(1,1): the only pooled cell
  // routing to fine (1,1) via switches has value max over parents of s1.
  const ScoreMap oracle = decode_oracle(pyr);
  for (std::size_t i = 0; i < oracle.data.size(); ++i) {
    const double a = dec.q[0].data[i], b = oracle.data[i];
    CHECK(no_score(a) == no_score(b));
    if (!no_score(a)) CHECK(a == b);
  }
  // The hot cell's decoded score strictly exceeds its correlation score:
  // it accumulated a positive coarse contribution.
  CHECK(dec.q[0].at(0, 0, 1, 1) > s0.at(0, 0, 1, 1));
}

TEST_CASE("decode equals the exhaustive path oracle bit for bit") {
  std::mt19937_64 rng(12345);
  int compared = 0;
  for (int t = 0; t < 200; ++t) {
    const int levels = 1 + static_cast<int>(rng() % 3);
    const int grid = 2 + static_cast<int>(rng() % 5);
    const int range0 = 2 + static_cast<int>(rng() % 7);
    const PyramidState pyr = random_pyramid(rng(), levels, grid, range0);
    const DecodeState dec = decode(pyr);
    const ScoreMap oracle = decode_oracle(pyr);
    REQUIRE(dec.q[0].data.size() == oracle.data.size());
    std::size_t mismatch = 0;
    for (std::size_t i = 0; i < oracle.data.size(); ++i) {
      const double a = dec.q[0].data[i], b = oracle.data[i];
      if (no_score(a) != no_score(b)) ++mismatch;
      else if (!no_score(a) && a != b) ++mismatch;
    }
    CHECK(mismatch == 0);
    ++compared;
  }
  CHECK(compared == 200);
}

TEST_CASE("decoded scores never fall below the correlation map") {
  const PyramidState pyr = random_pyramid(77, 3, 5, 6);
  const DecodeState dec = decode(pyr);
  for (std::size_t i = 0; i < pyr.s[0].data.size(); ++i) {
    if (no_score(dec.q[0].data[i])) continue;
    CHECK(dec.q[0].data[i] >= pyr.s[0].data[i] - 1e-15);
  }
}

TEST_CASE("replaying the recorded routes reproduces every decoded value") {
  const PyramidState pyr = random_pyramid(31, 2, 4, 5);
  const DecodeState dec = decode(pyr);
  const int L = pyr.levels();
  for (int l = 0; l < L; ++l) {
    const ScoreMap& qh = dec.q_half[l];
    const ScoreMap& up = dec.q[l + 1];
    const auto shifts = aggregation_shifts(pyr.geoms[l]);
    const int KK = qh.kextent() * qh.kextent();
    for (int iy = 0; iy < qh.rows; ++iy)
      for (int ix = 0; ix < qh.cols; ++ix)
        for (int k = 0; k < KK; ++k) {
          const std::int8_t c = dec.disagg_route[l][qh.index(iy, ix, k / qh.kextent(), k % qh.kextent())];
          const double v = qh.slice(iy, ix)[k];
          if (c < 0) {
            CHECK(no_score(v));
          } else {
            const int sy = iy - shifts[c][0], sx = ix - shifts[c][1];
            CHECK(up.slice(sy, sx)[k] == v);
          }
        }
    const ScoreMap& ql = dec.q[l];
    const int N = ql.kextent();
    for (int iy = 0; iy < ql.rows; ++iy)
      for (int ix = 0; ix < ql.cols; ++ix)
        for (int k = 0; k < N * N; ++k) {
          const std::int32_t rt = dec.unpool_route[l][ql.index(iy, ix, k / N, k % N)];
          const double v = ql.slice(iy, ix)[k];
          if (rt < 0) {
            CHECK(no_score(v));
          } else {
            CHECK(qh.slice(iy, ix)[rt] + pyr.s[l].slice(iy, ix)[k] == v);
          }
        }
  }
}

TEST_CASE("the oracle refuses oversized instances") {
  const PyramidState pyr = random_pyramid(5, 4, 4, 4);  // L = 4
  CHECK_THROWS_AS(decode_oracle(pyr), std::invalid_argument);
}

TEST_CASE("self-match decodes to the identity for most textured cells") {
  const GrayImage img = to_gray(make_texture(96, 96, Texture::SmoothNoise, 33));
  GeometryParams gp;
  gp.levels = 3;
  gp.range0 = 8;
  const auto geoms = make_levels(gp, 96, 96);
  const DescriptorField ref = extract_fixed(img, gp.ref_stride, gp.ref_offset);
  const DescriptorField tgt = extract_fixed(img, 1, 0);
  const PyramidState pyr = build_pyramid(ref, tgt, geoms,
                                         std::vector<double>(3, 1.4));
  const DecodeState dec = decode(pyr);
  const ScoreMap& q0 = dec.q[0];
  const int K = q0.kextent();
  int interior = 0, identity = 0;
  for (int iy = 1; iy + 1 < q0.rows; ++iy)
    for (int ix = 1; ix + 1 < q0.cols; ++ix) {
      ++interior;
      double best = kNoScore;
      int arg = -1;
      for (int k = 0; k < K * K; ++k) {
        const double v = q0.slice(iy, ix)[k];
        if (!no_score(v) && v > best) {
          best = v;
          arg = k;
        }
      }
      if (arg == q0.range * K + q0.range) ++identity;
    }
  CHECK(identity >= interior * 95 / 100);
}
