#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "deepmatch/errors.hpp"
#include "deepmatch/flow.hpp"
#include "deepmatch/image.hpp"

namespace dm {

// ---------------------------------------------------------------------------
// Binary PGM (P5) / PPM (P6), maxval 255 only.
// ---------------------------------------------------------------------------

namespace detail {

// Reads one netpbm header token, skipping whitespace and '#' comments.
inline std::string pnm_token(std::istream& in) {
  std::string tok;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  if (c == EOF) throw IoError("pnm: truncated header");
  while (c != EOF && !std::isspace(c) && c != '#') {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  if (c == '#') in.unget();
  return tok;
}

inline int pnm_int(std::istream& in, const char* what) {
  const std::string tok = pnm_token(in);
  int value = 0;
  for (char ch : tok) {
    if (ch < '0' || ch > '9') throw IoError(std::string("pnm: bad ") + what);
    if (value > 100000000) throw IoError(std::string("pnm: oversized ") + what);
    value = value * 10 + (ch - '0');
  }
  if (tok.empty()) throw IoError(std::string("pnm: missing ") + what);
  return value;
}

inline void expect_eof(std::istream& in, const char* fmt) {
  if (in.get() != EOF) throw IoError(std::string(fmt) + ": trailing garbage");
}

}  // namespace detail

inline ImageBuffer read_image(std::istream& in) {
  const std::string magic = detail::pnm_token(in);
  int channels = 0;
  if (magic == "P5") channels = 1;
  else if (magic == "P6") channels = 3;
  else throw IoError("pnm: unsupported magic '" + magic + "'");

  const int w = detail::pnm_int(in, "width");
  const int h = detail::pnm_int(in, "height");
  const int maxval = detail::pnm_int(in, "maxval");
  if (w <= 0 || h <= 0) throw IoError("pnm: degenerate extent");
  if (w > 1 << 16 || h > 1 << 16) throw IoError("pnm: extent too large");
  if (maxval != 255) throw IoError("pnm: unsupported maxval");

  ImageBuffer img(w, h, channels);
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.data.size())
    throw IoError("pnm: truncated payload");
  detail::expect_eof(in, "pnm");
  return img;
}

inline ImageBuffer read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return read_image(in);
}

inline void write_image(std::ostream& out, const ImageBuffer& img) {
  if (img.width <= 0 || img.height <= 0)
    throw IoError("pnm: refusing to write empty image");
  if (img.channels != 1 && img.channels != 3)
    throw IoError("pnm: unsupported channel count");
  out << (img.channels == 1 ? "P5" : "P6") << "\n"
      << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
  if (!out) throw IoError("pnm: write failed");
}

inline void write_image(const std::string& path, const ImageBuffer& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_image(out, img);
}

// ---------------------------------------------------------------------------
// Middlebury .flo: float magic 202021.25, int32 width/height, interleaved
// (u, v) float32 row-major. Invalid pixels carry magnitudes > 1e9.
// ---------------------------------------------------------------------------

inline constexpr float kFloMagic = 202021.25f;
inline constexpr double kFloInvalid = 1e10;

inline FlowField read_flow(std::istream& in) {
  float magic = 0.f;
  std::int32_t w = 0, h = 0;
  in.read(reinterpret_cast<char*>(&magic), 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  if (!in) throw IoError("flo: truncated header");
  if (magic != kFloMagic) throw IoError("flo: bad magic");
  if (w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16)
    throw IoError("flo: bad extent");

  FlowField f(w, h);
  std::vector<float> row(static_cast<std::size_t>(w) * 2);
  for (int y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * 4));
    if (static_cast<std::size_t>(in.gcount()) != row.size() * 4)
      throw IoError("flo: truncated payload");
    for (int x = 0; x < w; ++x) {
      const double u = row[2 * x], v = row[2 * x + 1];
      const bool ok = std::abs(u) <= 1e9 && std::abs(v) <= 1e9 &&
                      std::isfinite(u) && std::isfinite(v);
      f.set(y, x, ok ? u : 0.0, ok ? v : 0.0, ok);
    }
  }
  detail::expect_eof(in, "flo");
  return f;
}

inline FlowField read_flow(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return read_flow(in);
}

inline void write_flow(std::ostream& out, const FlowField& f) {
  const float magic = kFloMagic;
  const std::int32_t w = f.width, h = f.height;
  out.write(reinterpret_cast<const char*>(&magic), 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  std::vector<float> row(static_cast<std::size_t>(w) * 2);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = f.idx(y, x);
      row[2 * x] = f.valid[i] ? static_cast<float>(f.u[i])
                              : static_cast<float>(kFloInvalid);
      row[2 * x + 1] = f.valid[i] ? static_cast<float>(f.v[i])
                                  : static_cast<float>(kFloInvalid);
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * 4));
  }
  if (!out) throw IoError("flo: write failed");
}

inline void write_flow(const std::string& path, const FlowField& f) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_flow(out, f);
}

// ---------------------------------------------------------------------------
// Flow visualization: hue = atan2(v, u), saturation = |f| / max_magnitude
// (clamped to 1), value = 1. Invalid pixels are black.
// ---------------------------------------------------------------------------

namespace detail {
inline std::array<std::uint8_t, 3> hsv_to_rgb(double h_deg, double s, double v) {
  const double c = v * s;
  const double hp = h_deg / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  auto q = [&](double t) {
    return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(t + m, 0.0, 1.0)));
  };
  return {q(r), q(g), q(b)};
}
}  // namespace detail

inline ImageBuffer flow_to_color(const FlowField& f, double max_magnitude) {
  if (!(max_magnitude > 0)) throw std::invalid_argument("flow_to_color: max_magnitude must be > 0");
  ImageBuffer img(f.width, f.height, 3);
  for (int y = 0; y < f.height; ++y) {
    for (int x = 0; x < f.width; ++x) {
      const std::size_t i = f.idx(y, x);
      if (!f.valid[i]) continue;  // black
      const double u = f.u[i], v = f.v[i];
      double ang = std::atan2(v, u) * 180.0 / 3.14159265358979323846;
      if (ang < 0) ang += 360.0;
      if (ang >= 360.0) ang = 0.0;
      const double sat = std::clamp(std::hypot(u, v) / max_magnitude, 0.0, 1.0);
      const auto rgb = detail::hsv_to_rgb(ang, sat, 1.0);
      img.at(y, x, 0) = rgb[0];
      img.at(y, x, 1) = rgb[1];
      img.at(y, x, 2) = rgb[2];
    }
  }
  return img;
}

/// Largest flow magnitude over valid pixels (>= 1 so zero fields stay usable).
inline double max_flow_magnitude(const FlowField& f) {
  double m = 1.0;
  for (std::size_t i = 0; i < f.u.size(); ++i)
    if (f.valid[i]) m = std::max(m, std::hypot(f.u[i], f.v[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic pair generator.
// ---------------------------------------------------------------------------

enum class Texture { SmoothNoise, CheckerNoise };
enum class Motion { Translation, Affine, SmoothWarp };

struct SyntheticSpec {
  int width = 64;
  int height = 64;
  Texture texture = Texture::SmoothNoise;
  Motion motion = Motion::Translation;
  double magnitude = 4.0;  // max displacement per axis, pixels
  std::uint64_t seed = 0;
};

struct SyntheticPair {
  ImageBuffer i0, i1;
  FlowField flow;  // ground truth, defined on i0 pixels
};

/// Seeded grayscale texture.
inline ImageBuffer make_texture(int width, int height, Texture kind,
                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> base(static_cast<std::size_t>(width) * height);
  for (auto& b : base) b = uni(rng);

  if (kind == Texture::CheckerNoise) {
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const bool dark = ((x / 8) + (y / 8)) % 2 == 0;
        base[static_cast<std::size_t>(y) * width + x] =
            (dark ? 0.25 : 0.75) + 0.25 * (base[static_cast<std::size_t>(y) * width + x] - 0.5);
      }
  } else {
    // Smooth the white noise with a separable box blur, then restretch.
    const int rad = 2;
    std::vector<double> tmp(base.size());
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double s = 0;
        for (int d = -rad; d <= rad; ++d)
          s += base[static_cast<std::size_t>(y) * width + std::clamp(x + d, 0, width - 1)];
        tmp[static_cast<std::size_t>(y) * width + x] = s / (2 * rad + 1);
      }
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        double s = 0;
        for (int d = -rad; d <= rad; ++d)
          s += tmp[static_cast<std::size_t>(std::clamp(y + d, 0, height - 1)) * width + x];
        base[static_cast<std::size_t>(y) * width + x] = s / (2 * rad + 1);
      }
    double lo = 1e9, hi = -1e9;
    for (double b : base) { lo = std::min(lo, b); hi = std::max(hi, b); }
    const double span = std::max(hi - lo, 1e-9);
    for (auto& b : base) b = (b - lo) / span;
  }

  ImageBuffer img(width, height, 1);
  for (std::size_t i = 0; i < base.size(); ++i)
    img.data[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(base[i], 0.0, 1.0)));
  return img;
}

/// Integer-translation pair: i1(x) = i0(x - t) with clamp-to-edge sampling,
/// flow == t wherever p + t stays inside the frame.
inline SyntheticPair make_translation_pair(const ImageBuffer& i0, int dx, int dy) {
  SyntheticPair out;
  out.i0 = i0;
  out.i1 = ImageBuffer(i0.width, i0.height, i0.channels);
  for (int y = 0; y < i0.height; ++y)
    for (int x = 0; x < i0.width; ++x)
      for (int c = 0; c < i0.channels; ++c)
        out.i1.at(y, x, c) = i0.at(std::clamp(y - dy, 0, i0.height - 1),
                                   std::clamp(x - dx, 0, i0.width - 1), c);
  out.flow = FlowField(i0.width, i0.height);
  for (int y = 0; y < i0.height; ++y)
    for (int x = 0; x < i0.width; ++x)
      out.flow.set(y, x, dx, dy, out.flow.in_bounds(y + dy, x + dx));
  return out;
}

namespace detail {

inline double bilinear(const ImageBuffer& img, double y, double x, int c) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  auto s = [&](int yy, int xx) {
    return static_cast<double>(img.at(std::clamp(yy, 0, img.height - 1),
                                      std::clamp(xx, 0, img.width - 1), c));
  };
  const double top = (1 - fx) * s(y0, x0) + fx * s(y0, x0 + 1);
  const double bot = (1 - fx) * s(y0 + 1, x0) + fx * s(y0 + 1, x0 + 1);
  return (1 - fy) * top + fy * bot;
}

}  // namespace detail

inline SyntheticPair generate_pair(const SyntheticSpec& spec,
                                   double max_displacement =
                                       std::numeric_limits<double>::infinity()) {
  if (spec.width <= 0 || spec.height <= 0)
    throw ConfigError("generate_pair: bad extent");
  if (spec.magnitude < 0 || spec.magnitude > max_displacement)
    throw ConfigError("generate_pair: magnitude exceeds the scoreable range");

  std::mt19937_64 rng(spec.seed * 0x9e3779b97f4a7c15ULL + 1);
  ImageBuffer i0 = make_texture(spec.width, spec.height, spec.texture, spec.seed);

  if (spec.motion == Motion::Translation) {
    const int m = static_cast<int>(spec.magnitude);
    std::uniform_int_distribution<int> d(-m, m);
    return make_translation_pair(i0, d(rng), d(rng));
  }

  SyntheticPair out;
  out.i0 = i0;
  out.i1 = ImageBuffer(spec.width, spec.height, i0.channels);
  out.flow = FlowField(spec.width, spec.height);

  if (spec.motion == Motion::Affine) {
    // q = A (p - c) + c + t, with A and t scaled so |q - p| stays under the
    // magnitude budget.
    const double cy = 0.5 * (spec.height - 1), cx = 0.5 * (spec.width - 1);
    const double rmax = std::max(1.0, std::hypot(cy, cx));
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    const double lin = 0.5 * spec.magnitude / rmax;
    const double a11 = 1 + lin * uni(rng), a12 = lin * uni(rng);
    const double a21 = lin * uni(rng), a22 = 1 + lin * uni(rng);
    const double tx = 0.5 * spec.magnitude * uni(rng);
    const double ty = 0.5 * spec.magnitude * uni(rng);
    const double det = a11 * a22 - a12 * a21;
    if (std::abs(det) < 1e-6) throw ConfigError("generate_pair: degenerate affine");
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        const double qx = a11 * (x - cx) + a12 * (y - cy) + cx + tx;
        const double qy = a21 * (x - cx) + a22 * (y - cy) + cy + ty;
        out.flow.set(y, x, qx - x, qy - y,
                     qx >= 0 && qx <= spec.width - 1 && qy >= 0 && qy <= spec.height - 1);
        // Inverse map for synthesis.
        const double ry = y - cy - ty, rx = x - cx - tx;
        const double px = (a22 * rx - a12 * ry) / det + cx;
        const double py = (-a21 * rx + a11 * ry) / det + cy;
        for (int c = 0; c < i0.channels; ++c)
          out.i1.at(y, x, c) = static_cast<std::uint8_t>(
              std::lround(std::clamp(detail::bilinear(i0, py, px, c), 0.0, 255.0)));
      }
    return out;
  }

  // Smooth warp: low-frequency sinusoidal displacement, magnitude-bounded.
  std::uniform_real_distribution<double> ph(0.0, 6.28318530717958648);
  const double p1 = ph(rng), p2 = ph(rng), p3 = ph(rng), p4 = ph(rng);
  const double wy = 6.28318530717958648 / spec.height;
  const double wx = 6.28318530717958648 / spec.width;
  auto disp = [&](double y, double x) -> std::array<double, 2> {
    const double u = spec.magnitude * std::sin(wy * y + p1) * std::cos(wx * x + p2);
    const double v = spec.magnitude * std::cos(wy * y + p3) * std::sin(wx * x + p4);
    return {u, v};
  };
  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      const auto d = disp(y, x);
      out.flow.set(y, x, d[0], d[1],
                   x + d[0] >= 0 && x + d[0] <= spec.width - 1 &&
                       y + d[1] >= 0 && y + d[1] <= spec.height - 1);
      // Fixed-point inversion of p + d(p) = x; contraction for small warps.
      double py = y, px = x;
      for (int it = 0; it < 6; ++it) {
        const auto dd = disp(py, px);
        px = x - dd[0];
        py = y - dd[1];
      }
      for (int c = 0; c < i0.channels; ++c)
        out.i1.at(y, x, c) = static_cast<std::uint8_t>(
            std::lround(std::clamp(detail::bilinear(i0, py, px, c), 0.0, 255.0)));
    }
  return out;
}

}  // namespace dm
