#pragma once

// Image / feature-map resampling and the four-scale full-resolution feature
// pyramid consumed by the matcher.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "cnnflow/common.hpp"
#include "cnnflow/image.hpp"
#include "cnnflow/tensor_net.hpp"

namespace cnnflow {

// Normalized Gaussian taps, radius ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0)) raise<Error>("gaussian_kernel: sigma must be > 0 (got ", sigma, ")");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  return k;
}

// Separable Gaussian blur with clamp-to-edge borders.
inline Image blur_image(const Image& img, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  Image tmp(img.width, img.height), out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * img.clamped(x + i, y);
      tmp.at(x, y) = static_cast<float>(acc);
    }
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.clamped(x, y + i);
      out.at(x, y) = static_cast<float>(acc);
    }
  return out;
}

// Gaussian anti-alias (sigma 1) then 2:1 decimation. Output pixel x samples
// the blurred image at 2x + 0.5, the centre of its 2x2 footprint.
inline Image downsample_image(const Image& img, int min_side = 1) {
  const int w = img.width / 2, h = img.height / 2;
  if (w < min_side || h < min_side)
    raise<ShapeError>("downsample_image: ", img.width, "x", img.height, " is too small to halve (need >= ",
                      2 * min_side, " per side)");
  const Image blurred = blur_image(img, 1.0);
  Image out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(x, y) = blurred.bilinear(2.0 * x + 0.5, 2.0 * y + 0.5);
  return out;
}

// Halves a flow field: vectors are sampled at the same points as
// downsample_image and scaled by 1/2. A coarse pixel is valid only if all four
// contributing fine pixels are valid.
inline FlowField downsample_flow(const FlowField& flow) {
  const int w = flow.width / 2, h = flow.height / 2;
  if (w < 1 || h < 1) raise<ShapeError>("downsample_flow: field too small");
  FlowField out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double su = 0, sv = 0;
      bool ok = true;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const auto i = flow.index(2 * x + dx, 2 * y + dy);
          ok = ok && flow.valid[i];
          su += flow.u[i];
          sv += flow.v[i];
        }
      const auto o = out.index(x, y);
      out.u[o] = static_cast<float>(su / 8.0);
      out.v[o] = static_cast<float>(sv / 8.0);
      out.valid[o] = ok ? 1 : 0;
    }
  return out;
}

// A coarse pixel is occluded if any of its four fine pixels is.
inline Mask downsample_mask(const Mask& mask) {
  const int w = mask.width / 2, h = mask.height / 2;
  Mask out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out.set(x, y, mask.at(2 * x, 2 * y) || mask.at(2 * x + 1, 2 * y) || mask.at(2 * x, 2 * y + 1) ||
                        mask.at(2 * x + 1, 2 * y + 1));
  return out;
}

// Bilinear per-channel upsampling to target_w x target_h; pixel centres are
// aligned, i.e. target x maps to (x + 0.5) / factor - 0.5.
inline FeatureMap upsample_featuremap(const FeatureMap& fm, int factor, int target_w, int target_h) {
  if (factor < 1) raise<Error>("upsample_featuremap: factor must be >= 1");
  FeatureMap out(target_w, target_h, fm.dim, fm.receptive_field * factor);
  const int dim = fm.dim;
  for (int y = 0; y < target_h; ++y) {
    const double sy = (y + 0.5) / factor - 0.5;
    const double fy = std::floor(sy);
    const double ay = sy - fy;
    const int y0 = std::clamp(static_cast<int>(fy), 0, fm.height - 1);
    const int y1 = std::clamp(static_cast<int>(fy) + 1, 0, fm.height - 1);
    for (int x = 0; x < target_w; ++x) {
      const double sx = (x + 0.5) / factor - 0.5;
      const double fx = std::floor(sx);
      const double ax = sx - fx;
      const int x0 = std::clamp(static_cast<int>(fx), 0, fm.width - 1);
      const int x1 = std::clamp(static_cast<int>(fx) + 1, 0, fm.width - 1);
      const auto a = fm.at(x0, y0), b = fm.at(x1, y0), c = fm.at(x0, y1), d = fm.at(x1, y1);
      auto o = out.at(x, y);
      for (int k = 0; k < dim; ++k)
        o[k] = static_cast<float>((1 - ay) * ((1 - ax) * a[k] + ax * b[k]) + ay * ((1 - ax) * c[k] + ax * d[k]));
    }
  }
  return out;
}

// Per-channel Gaussian blur with sigma = 0.5 * factor (clamp borders).
// factor == 1 means no filtering.
inline FeatureMap lowpass_featuremap(const FeatureMap& fm, double factor) {
  if (!(factor >= 1.0)) raise<Error>("lowpass_featuremap: factor must be >= 1 (got ", factor, ")");
  if (factor == 1.0) return fm;
  const auto k = gaussian_kernel(0.5 * factor);
  const int r = static_cast<int>(k.size() / 2);
  const int dim = fm.dim;
  FeatureMap tmp(fm.width, fm.height, dim, fm.receptive_field), out = tmp;
  std::vector<double> acc(dim);
  for (int y = 0; y < fm.height; ++y)
    for (int x = 0; x < fm.width; ++x) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int i = -r; i <= r; ++i) {
        const auto src = fm.at(std::clamp(x + i, 0, fm.width - 1), y);
        for (int c = 0; c < dim; ++c) acc[c] += k[i + r] * src[c];
      }
      auto dst = tmp.at(x, y);
      for (int c = 0; c < dim; ++c) dst[c] = static_cast<float>(acc[c]);
    }
  for (int y = 0; y < fm.height; ++y)
    for (int x = 0; x < fm.width; ++x) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int i = -r; i <= r; ++i) {
        const auto src = tmp.at(x, std::clamp(y + i, 0, fm.height - 1));
        for (int c = 0; c < dim; ++c) acc[c] += k[i + r] * src[c];
      }
      auto dst = out.at(x, y);
      for (int c = 0; c < dim; ++c) dst[c] = static_cast<float>(acc[c]);
    }
  return out;
}

enum class PyramidMode {
  multi_resolution,  // scales 1-2 from the full-res net, 3-4 recomputed on 50% / 25% input
  legacy,            // every scale is a low-passed copy of the scale-1 features
};

struct PyramidConfig {
  std::vector<int> scale_factors{1, 1, 2, 4};
  double lowpass_factor = 2.25;
  double extra_scale2_lowpass = 2.0;
  bool lowpass_enabled = true;
  PyramidMode mode = PyramidMode::multi_resolution;

  void validate() const {
    if (scale_factors.empty()) raise<Error>("pyramid needs at least one scale");
    for (std::size_t i = 0; i < scale_factors.size(); ++i) {
      const int f = scale_factors[i];
      if (f < 1 || (f & (f - 1)) != 0) raise<Error>("pyramid scale factor ", f, " is not a power of two");
      if (i > 0 && f < scale_factors[i - 1]) raise<Error>("pyramid scale factors must be non-decreasing");
    }
    if (!(lowpass_factor > 1.0)) raise<Error>("pyramid.lowpass_factor must be > 1 (got ", lowpass_factor, ")");
    if (!(extra_scale2_lowpass >= 1.0)) raise<Error>("pyramid.extra_scale2_lowpass must be >= 1");
  }
};

struct ScaleProvenance {
  std::string net;  // "full_res" or "multi_res"
  int resolution_factor = 1;
  double lowpass = 1.0;
};

// Full-resolution feature maps, finest scale first.
struct ScalePyramid {
  std::vector<FeatureMap> maps;
  std::vector<ScaleProvenance> provenance;

  std::size_t scales() const noexcept { return maps.size(); }
};

// Dense features of a level that may be smaller than the receptive field: the
// level is replicate-padded up to it and the map cropped back.
template <typename T>
FeatureMap forward_dense_padded(const NetworkParams<T>& net, const Image& img) {
  const int rf = net.receptive_field;
  if (img.width >= rf && img.height >= rf) return forward_dense(net, img);
  Image padded(std::max(img.width, rf), std::max(img.height, rf));
  for (int y = 0; y < padded.height; ++y)
    for (int x = 0; x < padded.width; ++x) padded.at(x, y) = img.clamped(x, y);
  const FeatureMap full = forward_dense(net, padded);
  FeatureMap out(img.width, img.height, full.dim, full.receptive_field);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) std::ranges::copy(full.at(x, y), out.at(x, y).begin());
  return out;
}

// `multi_res` may equal `full_res` when only one network is available.
template <typename T>
ScalePyramid build_pyramid(const Image& img, const PyramidConfig& cfg, const NetworkParams<T>& full_res,
                           const NetworkParams<T>& multi_res) {
  cfg.validate();
  if (full_res.feature_dim != multi_res.feature_dim)
    raise<ShapeError>("build_pyramid: networks disagree on feature dimension");
  ScalePyramid pyr;
  const double lf = cfg.lowpass_enabled ? cfg.lowpass_factor : 1.0;
  const FeatureMap base = forward_dense(full_res, img);

  if (cfg.mode == PyramidMode::legacy) {
    for (std::size_t s = 0; s < cfg.scale_factors.size(); ++s) {
      const double factor = lf * std::pow(2.0, static_cast<double>(s));
      pyr.maps.push_back(lowpass_featuremap(base, factor));
      pyr.provenance.push_back({"full_res", 1, factor});
    }
    return pyr;
  }

  std::vector<Image> levels{img};
  int full_res_uses = 0;
  for (std::size_t s = 0; s < cfg.scale_factors.size(); ++s) {
    const int f = cfg.scale_factors[s];
    if (f == 1) {
      const double factor = lf * std::pow(cfg.extra_scale2_lowpass, full_res_uses++);
      pyr.maps.push_back(lowpass_featuremap(base, factor));
      pyr.provenance.push_back({"full_res", 1, factor});
      continue;
    }
    int level = 0;
    while ((1 << level) < f) ++level;
    while (static_cast<int>(levels.size()) <= level) levels.push_back(downsample_image(levels.back()));
    const FeatureMap coarse = forward_dense_padded(multi_res, levels[level]);
    pyr.maps.push_back(lowpass_featuremap(upsample_featuremap(coarse, f, img.width, img.height), lf));
    pyr.provenance.push_back({"multi_res", f, lf});
  }
  return pyr;
}

template <typename T>
ScalePyramid build_pyramid(const Image& img, const PyramidConfig& cfg, const NetworkParams<T>& net) {
  return build_pyramid(img, cfg, net, net);
}

}  // namespace cnnflow
