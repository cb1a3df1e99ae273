#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "deepmatch/image.hpp"

namespace dm {

/// Grid of unit-norm descriptors. Cell (r, c) sits at pixel
/// (offset + stride * r, offset + stride * c). Cells whose patch had no
/// usable signal hold the zero vector instead of a unit one.
struct DescriptorField {
  int rows = 0, cols = 0, dim = 0;
  int stride = 1;
  int offset = 0;
  std::vector<double> values;  // rows * cols * dim

  DescriptorField() = default;
  DescriptorField(int rows_, int cols_, int dim_, int stride_, int offset_)
      : rows(rows_), cols(cols_), dim(dim_), stride(stride_), offset(offset_),
        values(static_cast<std::size_t>(rows_) * cols_ * dim_, 0.0) {}

  std::size_t cell_index(int r, int c) const {
    return (static_cast<std::size_t>(r) * cols + c) * dim;
  }
  double* cell(int r, int c) { return values.data() + cell_index(r, c); }
  const double* cell(int r, int c) const { return values.data() + cell_index(r, c); }
};

namespace detail {

inline constexpr double kZeroNorm = 1e-8;

/// Normalizes `dim` entries in place; vectors with norm under kZeroNorm
/// become exactly zero. Returns the pre-normalization norm.
inline double l2_normalize(double* v, int dim) {
  double s = 0;
  for (int i = 0; i < dim; ++i) s += v[i] * v[i];
  const double n = std::sqrt(s);
  if (n < kZeroNorm) {
    for (int i = 0; i < dim; ++i) v[i] = 0.0;
    return n;
  }
  for (int i = 0; i < dim; ++i) v[i] /= n;
  return n;
}

inline int field_rows(int image_extent, int stride, int offset) {
  if (offset >= image_extent) throw std::invalid_argument("descriptor grid offset outside image");
  return (image_extent - 1 - offset) / stride + 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fixed extractor: 8-orientation gradient histograms over a 4x4 cell grid of
// a 16x16 patch (d = 128), L2 normalized. Border patches sample the image
// clamped to its edge.
// ---------------------------------------------------------------------------

inline constexpr int kFixedPatch = 16;
inline constexpr int kFixedDim = 128;

inline DescriptorField extract_fixed(const GrayImage& img, int stride, int offset) {
  if (img.width < kFixedPatch || img.height < kFixedPatch)
    throw std::invalid_argument("extract_fixed: image smaller than one patch");

  const int rows = detail::field_rows(img.height, stride, offset);
  const int cols = detail::field_rows(img.width, stride, offset);
  DescriptorField out(rows, cols, kFixedDim, stride, offset);

  // Per-pixel orientation bin and magnitude over the padded domain
  // [-8, H+8) x [-8, W+8).
  const int m = kFixedPatch / 2;
  const int ph = img.height + 2 * m, pw = img.width + 2 * m;
  std::vector<std::uint8_t> bins(static_cast<std::size_t>(ph) * pw);
  std::vector<double> mags(static_cast<std::size_t>(ph) * pw);
  constexpr double kTwoPi = 6.283185307179586476925;
  for (int y = -m; y < img.height + m; ++y) {
    for (int x = -m; x < img.width + m; ++x) {
      const double gx = (img.clamped(y, x + 1) - img.clamped(y, x - 1)) * 0.5;
      const double gy = (img.clamped(y + 1, x) - img.clamped(y - 1, x)) * 0.5;
      const std::size_t i = static_cast<std::size_t>(y + m) * pw + (x + m);
      const double mag = std::hypot(gx, gy);
      mags[i] = mag;
      if (mag <= 0) {
        bins[i] = 0;
      } else {
        double a = std::atan2(gy, gx);
        if (a < 0) a += kTwoPi;
        int b = static_cast<int>(a / (kTwoPi / 8.0));
        bins[i] = static_cast<std::uint8_t>(b >= 8 ? 7 : b);
      }
    }
  }

  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int cy = offset + stride * r, cx = offset + stride * c;
      double* d = out.cell(r, c);
      for (int dy = 0; dy < kFixedPatch; ++dy) {
        const int yy = cy - m + dy + m;  // padded coordinate
        const int cell_y = dy / 4;
        for (int dx = 0; dx < kFixedPatch; ++dx) {
          const std::size_t i = static_cast<std::size_t>(yy) * pw + (cx - m + dx + m);
          const int cell = cell_y * 4 + dx / 4;
          d[cell * 8 + bins[i]] += mags[i];
        }
      }
      detail::l2_normalize(d, kFixedDim);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trainable extractor: conv 3x3 (16) -> relu -> 2x2 max pool -> conv 3x3 (32)
// -> relu -> conv 4x4 head (64), L2 normalized. The stack is evaluated
// densely (pool at stride 1, later layers dilated by 2) so that the same
/// function of a 14x14 patch is available at every pixel; a field just
// samples it at its own stride. Strided application and dense sampling agree
// exactly, which keeps reference (stride 8) and target (stride 1) grids
// comparable.
// ---------------------------------------------------------------------------

inline constexpr int kTrainC1 = 16;
inline constexpr int kTrainC2 = 32;
inline constexpr int kTrainDim = 64;
inline constexpr int kTrainMargin = 7;  // half of the 14-px receptive field

struct ExtractorParams {
  std::vector<double> w1, b1;  // [16][1][3][3], [16]
  std::vector<double> w2, b2;  // [32][16][3][3], [32]
  std::vector<double> w3, b3;  // [64][32][4][4], [64]

  static ExtractorParams zeros() {
    ExtractorParams p;
    p.w1.assign(kTrainC1 * 9, 0.0);
    p.b1.assign(kTrainC1, 0.0);
    p.w2.assign(kTrainC2 * kTrainC1 * 9, 0.0);
    p.b2.assign(kTrainC2, 0.0);
    p.w3.assign(kTrainDim * kTrainC2 * 16, 0.0);
    p.b3.assign(kTrainDim, 0.0);
    return p;
  }

  /// Glorot-uniform weights, zero biases, fixed fill order.
  static ExtractorParams initialized(std::uint64_t seed) {
    ExtractorParams p = zeros();
    std::mt19937_64 rng(seed);
    auto fill = [&](std::vector<double>& w, int fan_in, int fan_out) {
      const double a = std::sqrt(6.0 / (fan_in + fan_out));
      std::uniform_real_distribution<double> uni(-a, a);
      for (auto& x : w) x = uni(rng);
    };
    fill(p.w1, 9, kTrainC1 * 9);
    fill(p.w2, kTrainC1 * 9, kTrainC2 * 9);
    fill(p.w3, kTrainC2 * 16, kTrainDim * 16);
    return p;
  }

  std::size_t param_count() const {
    return w1.size() + b1.size() + w2.size() + b2.size() + w3.size() + b3.size();
  }

  /// Flat view over [w1|b1|w2|b2|w3|b3].
  double& param(std::size_t i) {
    if (i < w1.size()) return w1[i];
    i -= w1.size();
    if (i < b1.size()) return b1[i];
    i -= b1.size();
    if (i < w2.size()) return w2[i];
    i -= w2.size();
    if (i < b2.size()) return b2[i];
    i -= b2.size();
    if (i < w3.size()) return w3[i];
    i -= w3.size();
    return b3.at(i);
  }

  /// Which conv stage a flat parameter index feeds (0, 1 or 2); lets callers
  /// reuse cached activations below the perturbed layer.
  int layer_of_param(std::size_t i) const {
    if (i < w1.size() + b1.size()) return 0;
    if (i < w1.size() + b1.size() + w2.size() + b2.size()) return 1;
    return 2;
  }
};

struct ExtractorGrads {
  std::vector<double> w1, b1, w2, b2, w3, b3;

  ExtractorGrads() {
    const ExtractorParams z = ExtractorParams::zeros();
    w1 = z.w1; b1 = z.b1; w2 = z.w2; b2 = z.b2; w3 = z.w3; b3 = z.b3;
  }
  void zero() {
    auto z = [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); };
    z(w1); z(b1); z(w2); z(b2); z(w3); z(b3);
  }
  std::size_t param_count() const {
    return w1.size() + b1.size() + w2.size() + b2.size() + w3.size() + b3.size();
  }
  double param(std::size_t i) const {
    if (i < w1.size()) return w1[i];
    i -= w1.size();
    if (i < b1.size()) return b1[i];
    i -= b1.size();
    if (i < w2.size()) return w2[i];
    i -= w2.size();
    if (i < b2.size()) return b2[i];
    i -= b2.size();
    if (i < w3.size()) return w3[i];
    i -= w3.size();
    return b3.at(i);
  }
  void axpy(double a, const ExtractorGrads& o) {
    auto ax = [a](std::vector<double>& x, const std::vector<double>& y) {
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += a * y[i];
    };
    ax(w1, o.w1); ax(b1, o.b1); ax(w2, o.w2); ax(b2, o.b2); ax(w3, o.w3); ax(b3, o.b3);
  }
};

/// Forward intermediates kept for the backward pass. Also supports partial
/// re-evaluation: when only layer >= j changed, stages below j are reused.
struct TrainableCache {
  int img_rows = 0, img_cols = 0;
  int ph = 0, pw = 0;              // padded extent
  std::vector<double> padded;      // ph * pw
  std::vector<double> a1;          // (ph-2)*(pw-2)*C1, post-relu
  std::vector<double> pl;          // (ph-3)*(pw-3)*C1, pooled (stride 1)
  std::vector<std::uint8_t> psw;   // pool switch 0..3 per pl entry
  std::vector<double> a2;          // (ph-7)*(pw-7)*C2, post-relu
  std::vector<double> prenorm;     // rows*cols*dim
  std::vector<double> norms;       // rows*cols
  int rows = 0, cols = 0, stride = 1, offset = 0;
};

/// `from_layer`: 0 recomputes everything, 1 reuses a1/pool, 2 reuses a2.
inline DescriptorField extract_trainable(const GrayImage& img,
                                         const ExtractorParams& p, int stride,
                                         int offset, TrainableCache& cache,
                                         int from_layer = 0) {
  if (img.width < 16 || img.height < 16)
    throw std::invalid_argument("extract_trainable: image smaller than one patch");

  const int M = kTrainMargin;
  const int ph = img.height + 2 * M, pw = img.width + 2 * M;
  const int a1h = ph - 2, a1w = pw - 2;
  const int plh = ph - 3, plw = pw - 3;
  const int a2h = ph - 7, a2w = pw - 7;
  const int rows = detail::field_rows(img.height, stride, offset);
  const int cols = detail::field_rows(img.width, stride, offset);

  if (from_layer <= 0) {
    cache.img_rows = img.height;
    cache.img_cols = img.width;
    cache.ph = ph;
    cache.pw = pw;
    cache.padded.assign(static_cast<std::size_t>(ph) * pw, 0.0);
    for (int y = 0; y < ph; ++y)
      for (int x = 0; x < pw; ++x)
        cache.padded[static_cast<std::size_t>(y) * pw + x] = img.clamped(y - M, x - M);

    // conv1 + relu
    cache.a1.assign(static_cast<std::size_t>(a1h) * a1w * kTrainC1, 0.0);
    for (int y = 0; y < a1h; ++y) {
      for (int x = 0; x < a1w; ++x) {
        double* out = cache.a1.data() + (static_cast<std::size_t>(y) * a1w + x) * kTrainC1;
        for (int oc = 0; oc < kTrainC1; ++oc) {
          const double* w = p.w1.data() + oc * 9;
          double s = p.b1[oc];
          for (int u = 0; u < 3; ++u) {
            const double* row = cache.padded.data() + static_cast<std::size_t>(y + u) * pw + x;
            s += w[u * 3 + 0] * row[0] + w[u * 3 + 1] * row[1] + w[u * 3 + 2] * row[2];
          }
          out[oc] = s > 0 ? s : 0.0;
        }
      }
    }

    // 2x2 max pool at stride 1 (dense evaluation); ties pick the first cell
    // in raster order.
    cache.pl.assign(static_cast<std::size_t>(plh) * plw * kTrainC1, 0.0);
    cache.psw.assign(static_cast<std::size_t>(plh) * plw * kTrainC1, 0);
    for (int y = 0; y < plh; ++y) {
      for (int x = 0; x < plw; ++x) {
        const std::size_t o = (static_cast<std::size_t>(y) * plw + x) * kTrainC1;
        for (int c = 0; c < kTrainC1; ++c) {
          double best = -1.0;
          int arg = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const double v = cache.a1[(static_cast<std::size_t>(y + dy) * a1w + x + dx) * kTrainC1 + c];
              if (v > best) { best = v; arg = dy * 2 + dx; }
            }
          cache.pl[o + c] = best;
          cache.psw[o + c] = static_cast<std::uint8_t>(arg);
        }
      }
    }
  }

  if (from_layer <= 1) {
    // conv2 (dilation 2) + relu
    cache.a2.assign(static_cast<std::size_t>(a2h) * a2w * kTrainC2, 0.0);
    for (int y = 0; y < a2h; ++y) {
      for (int x = 0; x < a2w; ++x) {
        double* out = cache.a2.data() + (static_cast<std::size_t>(y) * a2w + x) * kTrainC2;
        for (int oc = 0; oc < kTrainC2; ++oc) {
          const double* w = p.w2.data() + static_cast<std::size_t>(oc) * kTrainC1 * 9;
          double s = p.b2[oc];
          for (int u = 0; u < 3; ++u)
            for (int v = 0; v < 3; ++v) {
              const double* in = cache.pl.data() +
                  (static_cast<std::size_t>(y + 2 * u) * plw + x + 2 * v) * kTrainC1;
              const double* wk = w + (u * 3 + v) * kTrainC1;
              double t = 0;
              for (int ic = 0; ic < kTrainC1; ++ic) t += wk[ic] * in[ic];
              s += t;
            }
          out[oc] = s > 0 ? s : 0.0;
        }
      }
    }
  }

  // head (4x4, dilation 2) at the field's cells, then L2 normalization.
  cache.rows = rows;
  cache.cols = cols;
  cache.stride = stride;
  cache.offset = offset;
  cache.prenorm.assign(static_cast<std::size_t>(rows) * cols * kTrainDim, 0.0);
  cache.norms.assign(static_cast<std::size_t>(rows) * cols, 0.0);
  DescriptorField out(rows, cols, kTrainDim, stride, offset);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int ay = offset + stride * r;  // a2 anchor == image pixel
      const int ax = offset + stride * c;
      double* pre = cache.prenorm.data() + (static_cast<std::size_t>(r) * cols + c) * kTrainDim;
      for (int oc = 0; oc < kTrainDim; ++oc) {
        const double* w = p.w3.data() + static_cast<std::size_t>(oc) * kTrainC2 * 16;
        double s = p.b3[oc];
        for (int u = 0; u < 4; ++u)
          for (int v = 0; v < 4; ++v) {
            const double* in = cache.a2.data() +
                (static_cast<std::size_t>(ay + 2 * u) * a2w + ax + 2 * v) * kTrainC2;
            const double* wk = w + (u * 4 + v) * kTrainC2;
            double t = 0;
            for (int ic = 0; ic < kTrainC2; ++ic) t += wk[ic] * in[ic];
            s += t;
          }
        if (!std::isfinite(s))
          throw std::runtime_error("extract_trainable: non-finite activation");
        pre[oc] = s;
      }
      double* d = out.cell(r, c);
      for (int k = 0; k < kTrainDim; ++k) d[k] = pre[k];
      cache.norms[static_cast<std::size_t>(r) * cols + c] = detail::l2_normalize(d, kTrainDim);
    }
  }
  return out;
}

/// Accumulates d(loss)/d(params) given d(loss)/d(field values). The gradient
/// of the normalization is (g - d <d,g>) / norm; zero-vector cells pass no
/// gradient.
inline void extract_backward(const std::vector<double>& dvals,
                             const DescriptorField& field,
                             const TrainableCache& cache,
                             const ExtractorParams& p, ExtractorGrads& g) {
  if (dvals.size() != field.values.size() || cache.rows != field.rows ||
      cache.cols != field.cols)
    throw std::invalid_argument("extract_backward: cache/shape mismatch");
  const int M = kTrainMargin;
  const int ph = cache.ph, pw = cache.pw;
  const int a1h = ph - 2, a1w = pw - 2;
  const int plh = ph - 3, plw = pw - 3;
  const int a2h = ph - 7, a2w = pw - 7;
  (void)a1h;

  std::vector<double> da2(static_cast<std::size_t>(a2h) * a2w * kTrainC2, 0.0);

  // Normalization + head backward.
  for (int r = 0; r < cache.rows; ++r) {
    for (int c = 0; c < cache.cols; ++c) {
      const std::size_t ci = static_cast<std::size_t>(r) * cache.cols + c;
      const double n = cache.norms[ci];
      if (n < detail::kZeroNorm) continue;
      const double* dv = dvals.data() + ci * kTrainDim;
      const double* dir = field.values.data() + ci * kTrainDim;
      double dot = 0;
      for (int k = 0; k < kTrainDim; ++k) dot += dir[k] * dv[k];
      const int ay = cache.offset + cache.stride * r;
      const int ax = cache.offset + cache.stride * c;
      for (int oc = 0; oc < kTrainDim; ++oc) {
        const double gpre = (dv[oc] - dir[oc] * dot) / n;
        if (gpre == 0.0) continue;
        g.b3[oc] += gpre;
        double* wg = g.w3.data() + static_cast<std::size_t>(oc) * kTrainC2 * 16;
        const double* w = p.w3.data() + static_cast<std::size_t>(oc) * kTrainC2 * 16;
        for (int u = 0; u < 4; ++u)
          for (int v = 0; v < 4; ++v) {
            const std::size_t ii =
                (static_cast<std::size_t>(ay + 2 * u) * a2w + ax + 2 * v) * kTrainC2;
            const double* in = cache.a2.data() + ii;
            double* dout = da2.data() + ii;
            double* wgk = wg + (u * 4 + v) * kTrainC2;
            const double* wk = w + (u * 4 + v) * kTrainC2;
            for (int ic = 0; ic < kTrainC2; ++ic) {
              wgk[ic] += gpre * in[ic];
              dout[ic] += gpre * wk[ic];
            }
          }
      }
    }
  }

  // conv2 backward (relu mask from a2 > 0).
  std::vector<double> dpl(static_cast<std::size_t>(plh) * plw * kTrainC1, 0.0);
  for (int y = 0; y < a2h; ++y) {
    for (int x = 0; x < a2w; ++x) {
      const std::size_t oi = (static_cast<std::size_t>(y) * a2w + x) * kTrainC2;
      for (int oc = 0; oc < kTrainC2; ++oc) {
        double gv = da2[oi + oc];
        if (gv == 0.0 || cache.a2[oi + oc] <= 0.0) continue;
        g.b2[oc] += gv;
        double* wg = g.w2.data() + static_cast<std::size_t>(oc) * kTrainC1 * 9;
        const double* w = p.w2.data() + static_cast<std::size_t>(oc) * kTrainC1 * 9;
        for (int u = 0; u < 3; ++u)
          for (int v = 0; v < 3; ++v) {
            const std::size_t ii =
                (static_cast<std::size_t>(y + 2 * u) * plw + x + 2 * v) * kTrainC1;
            const double* in = cache.pl.data() + ii;
            double* dout = dpl.data() + ii;
            double* wgk = wg + (u * 3 + v) * kTrainC1;
            const double* wk = w + (u * 3 + v) * kTrainC1;
            for (int ic = 0; ic < kTrainC1; ++ic) {
              wgk[ic] += gv * in[ic];
              dout[ic] += gv * wk[ic];
            }
          }
      }
    }
  }

  // pool backward through the recorded switches, then conv1 backward.
  std::vector<double> da1(static_cast<std::size_t>((ph - 2)) * a1w * kTrainC1, 0.0);
  for (int y = 0; y < plh; ++y) {
    for (int x = 0; x < plw; ++x) {
      const std::size_t oi = (static_cast<std::size_t>(y) * plw + x) * kTrainC1;
      for (int c = 0; c < kTrainC1; ++c) {
        const double gv = dpl[oi + c];
        if (gv == 0.0) continue;
        const int sw = cache.psw[oi + c];
        const int dy = sw >> 1, dx = sw & 1;
        da1[(static_cast<std::size_t>(y + dy) * a1w + x + dx) * kTrainC1 + c] += gv;
      }
    }
  }
  for (int y = 0; y < ph - 2; ++y) {
    for (int x = 0; x < a1w; ++x) {
      const std::size_t oi = (static_cast<std::size_t>(y) * a1w + x) * kTrainC1;
      for (int oc = 0; oc < kTrainC1; ++oc) {
        const double gv = da1[oi + oc];
        if (gv == 0.0 || cache.a1[oi + oc] <= 0.0) continue;
        g.b1[oc] += gv;
        double* wg = g.w1.data() + oc * 9;
        for (int u = 0; u < 3; ++u) {
          const double* row = cache.padded.data() + static_cast<std::size_t>(y + u) * pw + x;
          wg[u * 3 + 0] += gv * row[0];
          wg[u * 3 + 1] += gv * row[1];
          wg[u * 3 + 2] += gv * row[2];
        }
      }
    }
  }
  (void)M;
}

}  // namespace dm
