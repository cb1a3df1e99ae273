#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "deepmatch/descriptors.hpp"
#include "deepmatch/image.hpp"
#include "deepmatch/io.hpp"

using namespace dm;

namespace {

GrayImage noise_image(int w, int h, std::uint64_t seed) {
  return to_gray(make_texture(w, h, Texture::SmoothNoise, seed));
}

double cell_norm(const DescriptorField& f, int r, int c) {
  double s = 0;
  const double* v = f.cell(r, c);
  for (int i = 0; i < f.dim; ++i) s += v[i] * v[i];
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("fixed extractor: constant image gives zero descriptors") {
  GrayImage img(20, 20);
  for (auto& v : img.v) v = 0.5;
  const DescriptorField f = extract_fixed(img, 4, 2);
  for (int r = 0; r < f.rows; ++r)
    for (int c = 0; c < f.cols; ++c) CHECK(cell_norm(f, r, c) == 0.0);
}

TEST_CASE("fixed extractor is deterministic and unit-normalized") {
  const GrayImage img = noise_image(32, 32, 5);
  const DescriptorField a = extract_fixed(img, 8, 4);
  const DescriptorField b = extract_fixed(img, 8, 4);
  CHECK(a.values == b.values);
  for (int r = 0; r < a.rows; ++r)
    for (int c = 0; c < a.cols; ++c) {
      const double n = cell_norm(a, r, c);
      CHECK((n == 0.0 || std::abs(n - 1.0) < 1e-6));
    }
}

TEST_CASE("fixed extractor refuses images smaller than one patch") {
  GrayImage img(12, 20);
  CHECK_THROWS_AS(extract_fixed(img, 4, 2), std::invalid_argument);
}

TEST_CASE("rotating an edge patch by 90 degrees moves mass two bins over") {
  // Vertical edge: gradients point along +x (bin 0). Rotated a quarter turn
  // they point along +y (bin 2).
  const int n = 32;
  GrayImage edge(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) edge.at(y, x) = x < n / 2 ? 0.0 : 1.0;
  GrayImage rot(n, n);  // quarter-turn rotation of `edge`
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) rot.at(y, x) = edge.at(n - 1 - x, y);

  const DescriptorField fe = extract_fixed(edge, 8, 4);
  const DescriptorField fr = extract_fixed(rot, 8, 4);

  auto marginal = [](const DescriptorField& f, int r, int c) {
    std::array<double, 8> m{};
    const double* v = f.cell(r, c);
    for (int cell = 0; cell < 16; ++cell)
      for (int b = 0; b < 8; ++b) m[b] += v[cell * 8 + b];
    return m;
  };
  const auto me = marginal(fe, 1, 1);
  const auto mr = marginal(fr, 1, 1);
  double mass_e = 0, mass_r = 0;
  for (int b = 0; b < 8; ++b) {
    mass_e += me[b];
    mass_r += mr[b];
  }
  CHECK(mass_e > 0);
  CHECK(me[0] / mass_e == Catch::Approx(1.0).margin(1e-9));
  CHECK(mr[2] / mass_r == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("trainable extractor: zero weights give zero descriptors") {
  const GrayImage img = noise_image(24, 24, 3);
  ExtractorParams p = ExtractorParams::zeros();
  TrainableCache cache;
  const DescriptorField f = extract_trainable(img, p, 4, 2, cache);
  for (int r = 0; r < f.rows; ++r)
    for (int c = 0; c < f.cols; ++c) CHECK(cell_norm(f, r, c) == 0.0);
}

TEST_CASE("trainable extractor is translation equivariant at the grid stride") {
  // Two crops of one big texture, offset by exactly the stride.
  const GrayImage big = noise_image(64, 64, 17);
  const int stride = 4, n = 40;
  GrayImage a(n, n), b(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      a.at(y, x) = big.at(y + 8, x + 8);
      b.at(y, x) = big.at(y + 8 + stride, x + 8 + stride);
    }
  const ExtractorParams p = ExtractorParams::initialized(99);
  TrainableCache ca, cb;
  const DescriptorField fa = extract_trainable(a, p, stride, 2, ca);
  const DescriptorField fb = extract_trainable(b, p, stride, 2, cb);
  // Interior cells (patch fully inside both crops): descriptor of b at
  // (r, c) equals a at (r + 1, c + 1).
  for (int r = 2; r + 4 < fb.rows; ++r)
    for (int c = 2; c + 4 < fb.cols; ++c) {
      const double* va = fa.cell(r + 1, c + 1);
      const double* vb = fb.cell(r, c);
      for (int d = 0; d < fa.dim; ++d)
        CHECK(vb[d] == Catch::Approx(va[d]).margin(1e-12));
    }
}

TEST_CASE("dense and strided grids agree at shared pixels") {
  const GrayImage img = noise_image(32, 32, 23);
  const ExtractorParams p = ExtractorParams::initialized(7);
  TrainableCache cd, cs;
  const DescriptorField dense = extract_trainable(img, p, 1, 0, cd);
  const DescriptorField strided = extract_trainable(img, p, 8, 4, cs);
  for (int r = 0; r < strided.rows; ++r)
    for (int c = 0; c < strided.cols; ++c) {
      const int y = 4 + 8 * r, x = 4 + 8 * c;
      const double* vs = strided.cell(r, c);
      const double* vd = dense.cell(y, x);
      for (int d = 0; d < dense.dim; ++d) CHECK(vs[d] == vd[d]);
    }
}

TEST_CASE("normalization backward is orthogonal to the descriptor direction") {
  const GrayImage img = noise_image(20, 20, 31);
  const ExtractorParams p = ExtractorParams::initialized(13);
  TrainableCache cache;
  const DescriptorField f = extract_trainable(img, p, 4, 2, cache);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  for (int r = 0; r < f.rows; ++r)
    for (int c = 0; c < f.cols; ++c) {
      const double n = cache.norms[static_cast<std::size_t>(r) * f.cols + c];
      if (n < 1e-8) continue;
      std::vector<double> g(static_cast<std::size_t>(f.dim));
      for (auto& v : g) v = uni(rng);
      const double* d = f.cell(r, c);
      double dot = 0;
      for (int i = 0; i < f.dim; ++i) dot += d[i] * g[static_cast<std::size_t>(i)];
      double ortho = 0;
      for (int i = 0; i < f.dim; ++i)
        ortho += d[i] * (g[static_cast<std::size_t>(i)] - d[i] * dot) / n;
      CHECK(std::abs(ortho) < 1e-9);
    }
}

TEST_CASE("backward: zero upstream gradient gives zero parameter gradient") {
  const GrayImage img = noise_image(20, 20, 37);
  const ExtractorParams p = ExtractorParams::initialized(41);
  TrainableCache cache;
  const DescriptorField f = extract_trainable(img, p, 4, 2, cache);
  ExtractorGrads g;
  std::vector<double> up(f.values.size(), 0.0);
  extract_backward(up, f, cache, p, g);
  for (std::size_t i = 0; i < g.param_count(); ++i) CHECK(g.param(i) == 0.0);
}

TEST_CASE("backward only sees pixels inside the receptive field") {
  // Two images identical inside the receptive field of one cell, different
  // outside: that cell's gradient contributions must match exactly.
  GrayImage a = noise_image(40, 40, 43);
  GrayImage b = a;
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x)
      if (y > 30 || x > 30) b.at(y, x) = 1.0 - b.at(y, x);

  const ExtractorParams p = ExtractorParams::initialized(47);
  TrainableCache ca, cb;
  const DescriptorField fa = extract_trainable(a, p, 4, 2, ca);
  const DescriptorField fb = extract_trainable(b, p, 4, 2, cb);

  // Cell (2, 2) sits at pixel (10, 10); its 14x14 window ends well before 30.
  std::vector<double> up(fa.values.size(), 0.0);
  up[fa.cell_index(2, 2) + 5] = 1.0;
  ExtractorGrads ga, gb;
  extract_backward(up, fa, ca, p, ga);
  extract_backward(up, fb, cb, p, gb);
  for (std::size_t i = 0; i < ga.param_count(); ++i)
    CHECK(ga.param(i) == gb.param(i));
}

TEST_CASE("analytic weight gradients match central differences") {
  const GrayImage img = noise_image(16, 16, 53);
  ExtractorParams p = ExtractorParams::initialized(59);
  TrainableCache cache;
  const DescriptorField f = extract_trainable(img, p, 4, 2, cache);

  // Scalar probe: fixed random linear functional of the field.
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::vector<double> coeff(f.values.size());
  for (auto& c : coeff) c = uni(rng);

  ExtractorGrads g;
  extract_backward(coeff, f, cache, p, g);

  auto value = [&](ExtractorParams& params) {
    TrainableCache c2;
    const DescriptorField f2 = extract_trainable(img, params, 4, 2, c2);
    double s = 0;
    for (std::size_t i = 0; i < f2.values.size(); ++i) s += coeff[i] * f2.values[i];
    return s;
  };

  const double h = 1e-5;
  std::uniform_int_distribution<std::size_t> pick(0, p.param_count() - 1);
  for (int t = 0; t < 40; ++t) {
    const std::size_t wi = pick(rng);
    double& w = p.param(wi);
    const double keep = w;
    w = keep + h;
    const double up = value(p);
    w = keep - h;
    const double dn = value(p);
    w = keep;
    const double numeric = (up - dn) / (2 * h);
    const double analytic = g.param(wi);
    const double scale = std::max({std::abs(numeric), std::abs(analytic), 1.0});
    CHECK(std::abs(numeric - analytic) / scale < 1e-4);
  }
}
