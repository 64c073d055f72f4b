#pragma once

// Training-pair extraction from image pairs with known flow: normalization,
// positive / negative patch sampling, multi-resolution level selection, and a
// synthetic pair generator with exact flow and occlusion.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "cnnflow/common.hpp"
#include "cnnflow/image.hpp"
#include "cnnflow/loss.hpp"
#include "cnnflow/pyramid.hpp"

namespace cnnflow {

struct ImagePair {
  Image i1, i2;
  FlowField flow;   // I1 -> I2, `valid` marks known ground truth
  Mask occlusion;   // on I1: true when the centre pixel is not visible in I2
  bool occlusion_is_proxy = false;

  void validate() const {
    const int w = i1.width, h = i1.height;
    if (i2.width != w || i2.height != h || flow.width != w || flow.height != h || occlusion.width != w ||
        occlusion.height != h)
      raise<ShapeError>("image pair components differ in size");
  }
};

struct NormalizeResult {
  Image image;
  bool zero_variance = false;
};

// Zero mean, unit (population) standard deviation. A constant image is only
// centred and flagged.
inline NormalizeResult normalize_image(const Image& raw) {
  if (raw.empty()) raise<ShapeError>("normalize_image: empty image");
  const double n = static_cast<double>(raw.size());
  double mean = 0.0;
  for (float v : raw.data) mean += v;
  mean /= n;
  double var = 0.0;
  for (float v : raw.data) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  NormalizeResult r{raw, sd == 0.0};
  const double scale = 1.0 / (r.zero_variance ? 1e-8 : sd);
  for (auto& v : r.image.data) v = static_cast<float>((v - mean) * scale);
  return r;
}

// Offset distribution for negatives around the true match: with probability
// near_probability a uniform integer radius in [min_distance, near_radius],
// otherwise log-uniform in [near_radius, far_cap]; uniform angle.
struct NegativeOffsetDist {
  int min_distance = 2;
  int near_radius = 16;
  double far_cap = 256.0;
  double near_probability = 0.5;

  void validate() const {
    if (min_distance < 1) raise<Error>("negatives.min_distance must be >= 1");
    if (!(min_distance <= near_radius && near_radius < far_cap))
      raise<Error>("negatives need min_distance <= near_radius < far_cap (got ", min_distance, ", ", near_radius,
                   ", ", far_cap, ")");
    if (!(near_probability >= 0.0 && near_probability <= 1.0))
      raise<Error>("negatives.near_probability must lie in [0, 1]");
  }

  // Default far cap: min(256, half the image diagonal).
  static NegativeOffsetDist for_image(int width, int height) {
    NegativeOffsetDist d;
    d.far_cap = std::min(256.0, 0.5 * std::hypot(width, height));
    if (d.far_cap <= d.near_radius) d.far_cap = d.near_radius + 1.0;
    return d;
  }
};

inline double draw_radius(const NegativeOffsetDist& dist, Rng& rng) {
  if (uniform01(rng) < dist.near_probability) return uniform_int(rng, dist.min_distance, dist.near_radius);
  return std::exp(uniform_real(rng, std::log(static_cast<double>(dist.near_radius)), std::log(dist.far_cap)));
}

// Patch centre in the coordinates of a resolution level.
struct PatchCenter {
  int x = 0;
  int y = 0;
  friend bool operator==(const PatchCenter&, const PatchCenter&) = default;
};

struct TrainingSample {
  PatchCenter p1, p2;
  PairLabel label = PairLabel::positive;
  double pixel_distance = 0.0;  // |p2 - p2+|
  double displacement = 0.0;    // |p2+ - p1|
  int level = 0;
};

struct SampleTriple {
  TrainingSample positive;
  TrainingSample negative;
};

// The window of side rf around centre c covers [c - rf/2, c - rf/2 + rf - 1].
inline bool window_inside(int cx, int cy, int rf, int width, int height) {
  const int x0 = cx - rf / 2, y0 = cy - rf / 2;
  return x0 >= 0 && y0 >= 0 && x0 + rf <= width && y0 + rf <= height;
}

template <typename T>
void extract_patch(const Image& img, PatchCenter c, int rf, std::span<T> out) {
  if (out.size() != static_cast<std::size_t>(rf) * rf) raise<ShapeError>("extract_patch: output size mismatch");
  if (!window_inside(c.x, c.y, rf, img.width, img.height))
    raise<ShapeError>("extract_patch: window at (", c.x, ",", c.y, ") leaves the image");
  const int x0 = c.x - rf / 2, y0 = c.y - rf / 2;
  for (int y = 0; y < rf; ++y)
    for (int x = 0; x < rf; ++x) out[static_cast<std::size_t>(y) * rf + x] = static_cast<T>(img.at(x0 + x, y0 + y));
}

// p2+ for p1 when p1 is an admissible positive location.
inline std::optional<PatchCenter> positive_target(const ImagePair& pair, int x, int y, int rf) {
  if (!window_inside(x, y, rf, pair.i1.width, pair.i1.height)) return std::nullopt;
  const auto i = pair.flow.index(x, y);
  if (!pair.flow.valid[i] || pair.occlusion.at(x, y)) return std::nullopt;
  const PatchCenter t{static_cast<int>(std::lround(x + pair.flow.u[i])), static_cast<int>(std::lround(y + pair.flow.v[i]))};
  if (!window_inside(t.x, t.y, rf, pair.i2.width, pair.i2.height)) return std::nullopt;
  return t;
}

// Uniform over admissible p1 locations (rejection sampling).
inline TrainingSample sample_positive(const ImagePair& pair, int rf, Rng& rng, int level = 0,
                                      int max_tries = 100000) {
  for (int attempt = 0; attempt < max_tries; ++attempt) {
    const int x = uniform_int(rng, 0, pair.i1.width - 1);
    const int y = uniform_int(rng, 0, pair.i1.height - 1);
    if (auto t = positive_target(pair, x, y, rf)) {
      TrainingSample s;
      s.p1 = {x, y};
      s.p2 = *t;
      s.label = PairLabel::positive;
      s.pixel_distance = 0.0;
      s.displacement = std::hypot(t->x - x, t->y - y);
      s.level = level;
      return s;
    }
  }
  raise<Error>("sample_positive: no admissible location after ", max_tries, " draws");
}

inline TrainingSample sample_negative(const ImagePair& pair, const TrainingSample& positive,
                                      const NegativeOffsetDist& dist, int rf, Rng& rng, int max_tries = 10000) {
  for (int attempt = 0; attempt < max_tries; ++attempt) {
    const double r = draw_radius(dist, rng);
    const double theta = uniform_real(rng, 0.0, 2.0 * M_PI);
    const int dx = static_cast<int>(std::lround(r * std::cos(theta)));
    const int dy = static_cast<int>(std::lround(r * std::sin(theta)));
    const double pd = std::round(std::hypot(dx, dy));
    if (pd < dist.min_distance) continue;
    const PatchCenter c{positive.p2.x + dx, positive.p2.y + dy};
    if (!window_inside(c.x, c.y, rf, pair.i2.width, pair.i2.height)) continue;
    TrainingSample s = positive;
    s.p2 = c;
    s.label = PairLabel::negative;
    s.pixel_distance = pd;
    return s;
  }
  raise<Error>("sample_negative: no in-bounds negative after ", max_tries, " draws");
}

// P(level l) proportional to ratio^l.
inline std::vector<double> level_probabilities(std::size_t levels, double ratio = 0.6) {
  std::vector<double> p(levels);
  double w = 1.0;
  for (auto& v : p) {
    v = w;
    w *= ratio;
  }
  const double sum = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& v : p) v /= sum;
  return p;
}

inline std::size_t draw_level(std::span<const double> probs, Rng& rng) {
  double u = uniform01(rng);
  for (std::size_t l = 0; l + 1 < probs.size(); ++l) {
    if (u < probs[l]) return l;
    u -= probs[l];
  }
  return probs.size() - 1;
}

// Pair at 100%, 50%, 25%, ... resolution. Images are downsampled from the
// normalized full-resolution images (no renormalization), matching what the
// pyramid feeds the network at test time.
inline std::vector<ImagePair> build_pair_levels(const ImagePair& pair, int levels) {
  std::vector<ImagePair> out{pair};
  for (int l = 1; l < levels; ++l) {
    const auto& prev = out.back();
    ImagePair next;
    next.i1 = downsample_image(prev.i1);
    next.i2 = downsample_image(prev.i2);
    next.flow = downsample_flow(prev.flow);
    next.occlusion = downsample_mask(prev.occlusion);
    next.occlusion_is_proxy = prev.occlusion_is_proxy;
    out.push_back(std::move(next));
  }
  return out;
}

// Picks a level by `probs`, then a positive and one negative at that level.
// The negative offset distribution is applied in level coordinates.
inline SampleTriple sample_multiresolution(std::span<const ImagePair> levels, std::span<const double> probs,
                                           const NegativeOffsetDist& dist, int rf, Rng& rng) {
  if (levels.empty() || levels.size() != probs.size())
    raise<Error>("sample_multiresolution: need one probability per level");
  const auto l = levels.size() == 1 ? std::size_t{0} : draw_level(probs, rng);
  SampleTriple t;
  t.positive = sample_positive(levels[l], rf, rng, static_cast<int>(l));
  t.negative = sample_negative(levels[l], t.positive, dist, rf, rng);
  return t;
}

// Occlusion stand-in when a dataset has none: forward/backward ground-truth
// flows that fail to cancel within `tolerance` pixels.
inline Mask occlusion_proxy(const FlowField& fwd, const FlowField& bwd, double tolerance = 1.5) {
  Mask m(fwd.width, fwd.height);
  for (int y = 0; y < fwd.height; ++y)
    for (int x = 0; x < fwd.width; ++x) {
      const auto i = fwd.index(x, y);
      if (!fwd.valid[i]) continue;
      const int tx = static_cast<int>(std::lround(x + fwd.u[i]));
      const int ty = static_cast<int>(std::lround(y + fwd.v[i]));
      if (tx < 0 || ty < 0 || tx >= bwd.width || ty >= bwd.height || !bwd.is_valid(tx, ty)) {
        m.set(x, y, true);
        continue;
      }
      const auto j = bwd.index(tx, ty);
      m.set(x, y, std::hypot(fwd.u[i] + bwd.u[j], fwd.v[i] + bwd.v[j]) > tolerance);
    }
  return m;
}

struct SynthOptions {
  double noise_sigma = 0.0;    // additive Gaussian noise on both images
  double gain_jitter = 0.0;    // I2 contrast gain drawn from 1 +- gain_jitter
  double bias_jitter = 0.0;    // I2 brightness offset drawn from +- bias_jitter
  double i2_blur_sigma = 0.0;  // extra blur on I2 (0 = off)
  int bumps = 4;               // Gaussian bumps in the flow field
};

namespace detail {

// Multi-octave band-limited noise scaled into [0.1, 0.9].
inline Image texture_field(int w, int h, Rng& rng) {
  Image acc(w, h, 0.0f);
  double amp = 1.0;
  for (double sigma : {1.0, 2.0, 4.0, 8.0}) {
    Image noise(w, h);
    for (auto& v : noise.data) v = static_cast<float>(normal01(rng));
    Image b = blur_image(noise, sigma);
    double var = 0.0;
    for (float v : b.data) var += static_cast<double>(v) * v;
    const double sd = std::sqrt(var / static_cast<double>(b.size()));
    for (std::size_t i = 0; i < acc.size(); ++i) acc.data[i] += static_cast<float>(amp * b.data[i] / sd);
    amp *= 0.7;
  }
  const auto [lo, hi] = std::minmax_element(acc.data.begin(), acc.data.end());
  const float a = *lo, span = std::max(*hi - *lo, 1e-6f);
  for (auto& v : acc.data) v = 0.1f + 0.8f * (v - a) / span;
  return acc;
}

struct Bump {
  double cx, cy, sigma, ax, ay;
};

struct SmoothFlow {
  double tx = 0, ty = 0;
  std::vector<Bump> bumps;
  double scale = 1.0;

  std::pair<double, double> operator()(double x, double y) const {
    double u = tx, v = ty;
    for (const auto& b : bumps) {
      const double e = std::exp(-((x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy)) / (2 * b.sigma * b.sigma));
      u += b.ax * e;
      v += b.ay * e;
    }
    return {u * scale, v * scale};
  }
};

}  // namespace detail

// Textured pair with exact dense flow. I2 is built by backward warping a
// texture canvas through a smooth flow g defined on I2 (translation plus
// Gaussian bumps), so I2(y) = canvas(y - g(y)); the I1 flow f solves
// f(x) = g(x + f(x)). Occluding textured rectangles are pasted into I2.
inline ImagePair generate_synthetic_pair(std::uint64_t seed, int width, int height, double max_displacement,
                                         int occluder_count, const SynthOptions& opt = {}) {
  if (max_displacement < 0 || max_displacement >= std::min(width, height) / 4.0)
    raise<Error>("generate_synthetic_pair: max_displacement must be in [0, min(width,height)/4)");
  Rng rng(seed);
  const int margin = static_cast<int>(std::ceil(max_displacement)) + 2;
  const Image canvas = detail::texture_field(width + 2 * margin, height + 2 * margin, rng);

  detail::SmoothFlow g;
  const double side = std::min(width, height);
  if (max_displacement > 0) {
    const double ang = uniform_real(rng, 0, 2 * M_PI);
    const double mag = uniform_real(rng, 0.2, 0.6);
    g.tx = mag * std::cos(ang);
    g.ty = mag * std::sin(ang);
    for (int b = 0; b < opt.bumps; ++b)
      g.bumps.push_back({uniform_real(rng, 0, width), uniform_real(rng, 0, height),
                         uniform_real(rng, side / 4, side / 2), uniform_real(rng, -0.5, 0.5),
                         uniform_real(rng, -0.5, 0.5)});
    double peak = 0.0;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const auto [u, v] = g(x, y);
        peak = std::max(peak, std::hypot(u, v));
      }
    g.scale = peak > 0 ? max_displacement / peak : 0.0;
  } else {
    g.scale = 0.0;
  }

  ImagePair pair;
  pair.i1 = Image(width, height);
  pair.i2 = Image(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      pair.i1.at(x, y) = canvas.at(x + margin, y + margin);
      const auto [u, v] = g(x, y);
      pair.i2.at(x, y) = canvas.bilinear(x - u + margin, y - v + margin);
    }

  struct Rect {
    int x0, y0, x1, y1;
  };
  std::vector<Rect> rects;
  for (int k = 0; k < occluder_count; ++k) {
    const int rw = uniform_int(rng, static_cast<int>(side / 8), static_cast<int>(side / 4));
    const int rh = uniform_int(rng, static_cast<int>(side / 8), static_cast<int>(side / 4));
    const int x0 = uniform_int(rng, 0, width - rw);
    const int y0 = uniform_int(rng, 0, height - rh);
    rects.push_back({x0, y0, x0 + rw - 1, y0 + rh - 1});
    const Image patch = detail::texture_field(rw, rh, rng);
    for (int y = 0; y < rh; ++y)
      for (int x = 0; x < rw; ++x) pair.i2.at(x0 + x, y0 + y) = patch.at(x, y);
  }

  if (opt.i2_blur_sigma > 0) pair.i2 = blur_image(pair.i2, opt.i2_blur_sigma);
  const double gain = 1.0 + uniform_real(rng, -opt.gain_jitter, opt.gain_jitter);
  const double bias = uniform_real(rng, -opt.bias_jitter, opt.bias_jitter);
  for (auto& v : pair.i2.data) v = static_cast<float>(gain * v + bias);
  if (opt.noise_sigma > 0) {
    for (auto& v : pair.i1.data) v += static_cast<float>(opt.noise_sigma * normal01(rng));
    for (auto& v : pair.i2.data) v += static_cast<float>(opt.noise_sigma * normal01(rng));
  }

  pair.flow = FlowField(width, height);
  pair.occlusion = Mask(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double u = 0, v = 0;
      for (int it = 0; it < 100; ++it) {
        const auto [gu, gv] = g(x + u, y + v);
        const bool done = std::abs(gu - u) < 1e-7 && std::abs(gv - v) < 1e-7;
        u = gu;
        v = gv;
        if (done) break;
      }
      const auto i = pair.flow.index(x, y);
      pair.flow.u[i] = static_cast<float>(u);
      pair.flow.v[i] = static_cast<float>(v);
      const double tx = x + u, ty = y + v;
      bool occluded = tx < 0 || ty < 0 || tx > width - 1 || ty > height - 1;
      const int fx = static_cast<int>(std::floor(tx)), fy = static_cast<int>(std::floor(ty));
      for (const auto& r : rects)
        occluded = occluded || (fx + 1 >= r.x0 && fx <= r.x1 && fy + 1 >= r.y0 && fy <= r.y1);
      pair.occlusion.set(x, y, occluded);
    }
  return pair;
}

// Normalizes both images of a pair in place.
inline void normalize_pair(ImagePair& pair) {
  pair.i1 = normalize_image(pair.i1).image;
  pair.i2 = normalize_image(pair.i2).image;
}

}  // namespace cnnflow
