#pragma once

#include <cstdint>
#include <vector>

namespace dm {

/// Dense 2-channel displacement map with a per-pixel validity mask.
/// u is the x displacement, v the y displacement.
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<double> u, v;
  std::vector<std::uint8_t> valid;

  FlowField() = default;
  FlowField(int w, int h)
      : width(w), height(h),
        u(static_cast<std::size_t>(w) * h, 0.0),
        v(static_cast<std::size_t>(w) * h, 0.0),
        valid(static_cast<std::size_t>(w) * h, 0) {}

  std::size_t idx(int y, int x) const { return static_cast<std::size_t>(y) * width + x; }

  void set(int y, int x, double du, double dv, bool ok = true) {
    const std::size_t i = idx(y, x);
    u[i] = du;
    v[i] = dv;
    valid[i] = ok ? 1 : 0;
  }
  bool is_valid(int y, int x) const { return valid[idx(y, x)] != 0; }
  bool in_bounds(int y, int x) const {
    return y >= 0 && y < height && x >= 0 && x < width;
  }
};

}  // namespace dm
