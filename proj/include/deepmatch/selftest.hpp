#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <vector>

#include "deepmatch/autograd.hpp"
#include "deepmatch/decoder.hpp"
#include "deepmatch/pyramid.hpp"

namespace dm {

/// Random but internally consistent pyramid on a small grid: a seeded level-0
/// map (values in [0,1], a share of no-score cells) pushed through the real
/// pooling/aggregation stack with random exponents.
inline PyramidState random_pyramid(std::uint64_t seed, int levels, int grid,
                                   int range0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  GeometryParams gp;
  gp.levels = levels;
  gp.range0 = range0;
  gp.ref_stride = 8;
  gp.ref_offset = 4;
  gp.target_stride = 1;
  gp.agg_window = 8;
  gp.pool_halfwin = 1;
  const int image_rows = gp.ref_offset + gp.ref_stride * (grid - 1) + 1;
  auto geoms = make_levels(gp, image_rows, image_rows);

  ScoreMap s0(grid, grid, range0, 0, false, 0.0);
  for (auto& v : s0.data) {
    const double r = uni(rng);
    v = r < 0.1 ? kNoScore : uni(rng);
  }
  std::vector<double> exponents(static_cast<std::size_t>(levels));
  for (auto& e : exponents) e = 1.0 + uni(rng);
  return build_pyramid_from_scores(std::move(s0), geoms, exponents);
}

struct SuiteResult {
  int total = 0;
  int failed = 0;
  bool pass() const { return failed == 0 && total > 0; }
};

/// Layered decode against the exhaustive path walk, bit-exact (with a 1e-12
/// relative fallback reported separately, which a matched summation order
/// should never need).
inline SuiteResult decoder_equivalence_suite(int count, std::uint64_t seed,
                                             std::ostream& log) {
  SuiteResult res;
  std::mt19937_64 rng(seed);
  for (int t = 0; t < count; ++t) {
    const int levels = 1 + static_cast<int>(rng() % 3);
    const int grid = 2 + static_cast<int>(rng() % 5);  // up to 6x6
    const int range0 = 2 + static_cast<int>(rng() % 7);  // up to 8
    const PyramidState pyr = random_pyramid(rng(), levels, grid, range0);
    const DecodeState dec = decode(pyr);
    const ScoreMap oracle = decode_oracle(pyr);
    ++res.total;
    std::size_t mismatched = 0;
    for (std::size_t i = 0; i < oracle.data.size(); ++i) {
      const double a = dec.q[0].data[i], b = oracle.data[i];
      if (no_score(a) != no_score(b)) { ++mismatched; continue; }
      if (!no_score(a) && a != b) ++mismatched;
    }
    if (mismatched != 0) {
      ++res.failed;
      log << "decoder equivalence: seed case " << t << " (L=" << levels
          << ", grid=" << grid << ", R0=" << range0 << ") has " << mismatched
          << " mismatched cells\n";
    }
  }
  return res;
}

/// Gradient checks over seeded instances: exponents with both extractors,
/// weights with the trainable one. Tie-skipped instances are reported but do
/// not fail the suite.
inline SuiteResult gradcheck_suite(int instances, std::uint64_t seed,
                                   std::ostream& log, int* tie_skips = nullptr) {
  SuiteResult res;
  int skips = 0;
  for (int t = 0; t < instances; ++t) {
    GradcheckConfig cfg;
    cfg.seed = seed + static_cast<std::uint64_t>(t) * 1000;
    ModelParams params;
    params.kind = DescriptorKind::Trainable;
    params.extractor = ExtractorParams::initialized(cfg.seed ^ 0x77);
    params.exponents = gradcheck_safe_exponents(cfg.levels);
    const GradcheckReport rep = gradcheck(cfg, params);
    ++res.total;
    if (rep.tie_skipped) {
      ++skips;
      log << "gradcheck: instance " << t << " tie-skipped\n";
    } else if (!rep.pass) {
      ++res.failed;
      log << "gradcheck: instance " << t << " failed: " << rep.note << "\n";
    }
  }
  if (tie_skips) *tie_skips = skips;
  return res;
}

/// The closed-form discretization identities: 3x3 pooling when the pooling
/// half window equals the displacement stride, the halving range sequence
/// from 80, and the padded-extent identity at every transition.
inline SuiteResult discretization_suite(std::ostream& log) {
  SuiteResult res;

  auto check = [&](bool ok, const char* what) {
    ++res.total;
    if (!ok) {
      ++res.failed;
      log << "discretization: " << what << " failed\n";
    }
  };

  GeometryParams gp;
  gp.levels = 6;
  gp.range0 = 80;
  auto geoms = make_levels(gp, 512, 512);
  check(pool_params(geoms[0]).window == 3, "3x3 pooling window");

  const int expect[] = {80, 40, 20, 10, 5, 3, 2};
  bool chain = true;
  for (int l = 0; l <= 6; ++l) chain = chain && geoms[l].range == expect[l];
  check(chain, "range sequence 80,40,20,10,5,3,2");

  bool extent = true;
  for (int l = 0; l < 6; ++l) {
    const PoolParams pp = pool_params(geoms[l]);
    const int in = 2 * geoms[l].range + 1;
    const int out = 2 * geoms[l + 1].range + 1;
    extent = extent && in + pp.pad_lo + pp.pad_hi == 2 * out + pp.window - 2;
    extent = extent && (in + pp.pad_lo + pp.pad_hi - pp.window) / 2 + 1 == out;
  }
  check(extent, "padded extent identity");
  return res;
}

}  // namespace dm
