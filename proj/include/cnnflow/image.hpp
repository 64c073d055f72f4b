#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "cnnflow/common.hpp"

namespace cnnflow {

// Single-channel float raster, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, float fill = 0.0f)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {
    if (w < 0 || h < 0) raise<ShapeError>("negative image size ", w, "x", h);
  }

  bool empty() const noexcept { return data.empty(); }
  std::size_t size() const noexcept { return data.size(); }
  bool contains(int x, int y) const noexcept {
    return x >= 0 && y >= 0 && x < width && y < height;
  }

  float& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  float at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }

  float clamped(int x, int y) const {
    return at(std::clamp(x, 0, width - 1), std::clamp(y, 0, height - 1));
  }

  // Bilinear lookup with clamp-to-edge outside the raster.
  float bilinear(double x, double y) const {
    const double fx = std::floor(x), fy = std::floor(y);
    const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
    const double ax = x - fx, ay = y - fy;
    const double top = (1 - ax) * clamped(x0, y0) + ax * clamped(x0 + 1, y0);
    const double bot = (1 - ax) * clamped(x0, y0 + 1) + ax * clamped(x0 + 1, y0 + 1);
    return static_cast<float>((1 - ay) * top + ay * bot);
  }

  friend bool operator==(const Image&, const Image&) = default;
};

// Per-pixel boolean raster (occlusion masks, validity).
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int w, int h, bool fill = false)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill ? 1 : 0) {}

  bool at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v) { data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
  }

  friend bool operator==(const Mask&, const Mask&) = default;
};

// Dense 2D displacement with validity and per-pixel match cost.
// Values at invalid pixels are unspecified.
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<float> u, v, cost;
  std::vector<std::uint8_t> valid;

  FlowField() = default;
  FlowField(int w, int h)
      : width(w),
        height(h),
        u(static_cast<std::size_t>(w) * h, 0.0f),
        v(static_cast<std::size_t>(w) * h, 0.0f),
        cost(static_cast<std::size_t>(w) * h, 0.0f),
        valid(static_cast<std::size_t>(w) * h, 1) {}

  std::size_t index(int x, int y) const noexcept { return static_cast<std::size_t>(y) * width + x; }
  std::size_t size() const noexcept { return u.size(); }
  bool is_valid(int x, int y) const { return valid[index(x, y)] != 0; }
};

// Per-pixel F-dimensional feature vectors at full image resolution (HWC).
// Pixels closer than the receptive-field half width to the image edge were
// computed on clamp-padded input.
struct FeatureMap {
  int width = 0;
  int height = 0;
  int dim = 0;
  int receptive_field = 1;
  std::vector<float> values;

  FeatureMap() = default;
  FeatureMap(int w, int h, int f, int rf = 1)
      : width(w), height(h), dim(f), receptive_field(rf),
        values(static_cast<std::size_t>(w) * h * f, 0.0f) {}

  // Left/top border width; right/bottom width is receptive_field - 1 - border().
  int border() const noexcept { return receptive_field / 2; }

  bool interior(int x, int y) const noexcept {
    const int lo = border();
    const int hi = receptive_field - 1 - lo;
    return x >= lo && y >= lo && x < width - hi && y < height - hi;
  }

  std::span<float> at(int x, int y) {
    return {values.data() + (static_cast<std::size_t>(y) * width + x) * dim, static_cast<std::size_t>(dim)};
  }
  std::span<const float> at(int x, int y) const {
    return {values.data() + (static_cast<std::size_t>(y) * width + x) * dim, static_cast<std::size_t>(dim)};
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

}  // namespace cnnflow
