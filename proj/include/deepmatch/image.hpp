#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "deepmatch/errors.hpp"

namespace dm {

/// 8-bit raster with 1 (gray) or 3 (RGB, interleaved) channels.
struct ImageBuffer {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;

  ImageBuffer() = default;
  ImageBuffer(int w, int h, int c)
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, 0) {}

  std::uint8_t& at(int y, int x, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool in_bounds(int y, int x) const {
    return y >= 0 && y < height && x >= 0 && x < width;
  }
};

/// Grayscale plane with values in [0, 1]; the input format of the descriptor
/// extractors. Out-of-bounds reads clamp to the nearest edge pixel.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> v;

  GrayImage() = default;
  GrayImage(int w, int h) : width(w), height(h), v(static_cast<std::size_t>(w) * h, 0.0) {}

  double& at(int y, int x) { return v[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return v[static_cast<std::size_t>(y) * width + x]; }

  double clamped(int y, int x) const {
    y = std::clamp(y, 0, height - 1);
    x = std::clamp(x, 0, width - 1);
    return v[static_cast<std::size_t>(y) * width + x];
  }
};

/// Luma conversion with weights 0.299 / 0.587 / 0.114, scaled to [0, 1].
inline GrayImage to_gray(const ImageBuffer& img) {
  GrayImage out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double g;
      if (img.channels == 1) {
        g = img.at(y, x);
      } else {
        g = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
      }
      out.at(y, x) = g / 255.0;
    }
  }
  return out;
}

}  // namespace dm
