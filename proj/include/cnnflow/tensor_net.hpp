#pragma once

// Small Siamese-branch CNN: conv / maxpool / tanh stacks that map a square
// patch to a 1x1xF feature vector, with analytic backprop and a dense
// (shared-convolution) evaluator that produces one feature per image pixel.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cnnflow/common.hpp"
#include "cnnflow/image.hpp"

namespace cnnflow {

enum class LayerKind : std::uint32_t { conv = 1, maxpool = 2, tanh = 3 };

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  int kernel = 1;
  int stride = 1;
  int in_channels = 0;
  int out_channels = 0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline LayerSpec conv_layer(int kernel, int in, int out) { return {LayerKind::conv, kernel, 1, in, out}; }
inline LayerSpec pool_layer(int kernel, int channels) {
  return {LayerKind::maxpool, kernel, kernel, channels, channels};
}
inline LayerSpec tanh_layer(int channels) { return {LayerKind::tanh, 1, 1, channels, channels}; }

struct ArchitectureInfo {
  int receptive_field = 0;
  int feature_dim = 0;
  int in_channels = 0;
};

// Validates a layer stack and derives the patch side length it consumes.
inline ArchitectureInfo check_architecture(std::span<const LayerSpec> layers) {
  if (layers.empty()) raise<ShapeError>("architecture has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.in_channels < 1 || l.out_channels < 1) raise<ShapeError>("layer ", i, ": channel counts must be >= 1");
    if (i > 0 && l.in_channels != layers[i - 1].out_channels)
      raise<ShapeError>("layer ", i, ": expects ", l.in_channels, " input channels, previous layer gives ",
                        layers[i - 1].out_channels);
    switch (l.kind) {
      case LayerKind::conv:
        if (l.kernel < 1) raise<ShapeError>("layer ", i, ": conv kernel must be >= 1");
        if (l.stride != 1) raise<ShapeError>("layer ", i, ": only stride-1 convolutions are supported");
        break;
      case LayerKind::maxpool:
        if (l.kernel < 1 || l.stride != l.kernel)
          raise<ShapeError>("layer ", i, ": maxpool stride must equal its kernel size");
        if (l.in_channels != l.out_channels) raise<ShapeError>("layer ", i, ": maxpool cannot change channels");
        break;
      case LayerKind::tanh:
        if (l.in_channels != l.out_channels) raise<ShapeError>("layer ", i, ": tanh cannot change channels");
        break;
      default:
        raise<ShapeError>("layer ", i, ": unknown layer kind ", static_cast<std::uint32_t>(l.kind));
    }
  }
  if (layers.back().kind != LayerKind::tanh) raise<ShapeError>("architecture must end with a tanh layer");
  int side = 1;
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    if (it->kind == LayerKind::conv) side += it->kernel - 1;
    if (it->kind == LayerKind::maxpool) side *= it->kernel;
  }
  return {side, layers.back().out_channels, layers.front().in_channels};
}

// The full topology at a 32x32 receptive field: channel widths divided by
// four and the later 5x5 kernels shrunk to 3x3 so the stack closes at 1x1.
inline std::vector<LayerSpec> desk_architecture(int in_channels = 1) {
  return {conv_layer(5, in_channels, 16), tanh_layer(16), pool_layer(2, 16),
          conv_layer(3, 16, 20),          tanh_layer(20), conv_layer(3, 20, 40),
          tanh_layer(40),                 pool_layer(2, 40), conv_layer(3, 40, 64),
          tanh_layer(64),                 conv_layer(3, 64, 128), tanh_layer(128),
          conv_layer(1, 128, 64),         tanh_layer(64)};
}

// Full-width 56x56 architecture ("full56").
inline std::vector<LayerSpec> full_architecture(int in_channels = 1) {
  return {conv_layer(5, in_channels, 64), tanh_layer(64), pool_layer(2, 64),
          conv_layer(5, 64, 80),          tanh_layer(80), conv_layer(5, 80, 160),
          tanh_layer(160),                pool_layer(2, 160), conv_layer(5, 160, 256),
          tanh_layer(256),                conv_layer(5, 256, 512), tanh_layer(512),
          conv_layer(1, 512, 256),        tanh_layer(256)};
}

// Parses "desk32", "full56", or a comma list such as
// "conv5x16,tanh,pool2,conv3x20,tanh" (conv<kernel>x<out>, pool<k>, tanh).
inline std::vector<LayerSpec> parse_architecture(std::string_view text, int in_channels = 1) {
  if (text == "desk32") return desk_architecture(in_channels);
  if (text == "full56") return full_architecture(in_channels);
  std::vector<LayerSpec> layers;
  int channels = in_channels;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    auto tok = text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
    while (!tok.empty() && tok.front() == ' ') tok.remove_prefix(1);
    while (!tok.empty() && tok.back() == ' ') tok.remove_suffix(1);
    try {
      if (tok == "tanh") {
        layers.push_back(tanh_layer(channels));
      } else if (tok.starts_with("pool")) {
        layers.push_back(pool_layer(std::stoi(std::string(tok.substr(4))), channels));
      } else if (tok.starts_with("conv")) {
        const auto x = tok.find('x');
        if (x == std::string_view::npos) throw std::invalid_argument("missing x");
        const int k = std::stoi(std::string(tok.substr(4, x - 4)));
        const int out = std::stoi(std::string(tok.substr(x + 1)));
        layers.push_back(conv_layer(k, channels, out));
        channels = out;
      } else {
        throw std::invalid_argument("unknown");
      }
    } catch (const std::exception&) {
      raise<FormatError>("bad architecture token '", tok, "'");
    }
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  check_architecture(layers);
  return layers;
}

// Layer stack plus per-conv-layer weights [out][in][ky][kx] and biases.
// Also used as the gradient container.
template <typename T>
struct NetworkParams {
  std::vector<LayerSpec> layers;
  std::vector<std::vector<T>> weights;
  std::vector<std::vector<T>> biases;
  int receptive_field = 0;
  int feature_dim = 0;
  int in_channels = 0;

  static NetworkParams zeros(std::vector<LayerSpec> spec) {
    const auto info = check_architecture(spec);
    NetworkParams p;
    p.receptive_field = info.receptive_field;
    p.feature_dim = info.feature_dim;
    p.in_channels = info.in_channels;
    p.weights.resize(spec.size());
    p.biases.resize(spec.size());
    for (std::size_t i = 0; i < spec.size(); ++i) {
      const auto& l = spec[i];
      if (l.kind != LayerKind::conv) continue;
      p.weights[i].assign(static_cast<std::size_t>(l.out_channels) * l.in_channels * l.kernel * l.kernel, T(0));
      p.biases[i].assign(static_cast<std::size_t>(l.out_channels), T(0));
    }
    p.layers = std::move(spec);
    return p;
  }

  std::size_t patch_size() const {
    return static_cast<std::size_t>(in_channels) * receptive_field * receptive_field;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) n += weights[i].size() + biases[i].size();
    return n;
  }

  // Visits every scalar in checkpoint order (per layer: weights, then biases).
  template <typename F>
  void for_each(F&& f) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (auto& w : weights[i]) f(w);
      for (auto& b : biases[i]) f(b);
    }
  }
  template <typename F>
  void for_each(F&& f) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (const auto& w : weights[i]) f(w);
      for (const auto& b : biases[i]) f(b);
    }
  }

  // Throws NumericError naming the first non-finite value.
  void check_finite(std::string_view what) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (std::size_t j = 0; j < weights[i].size(); ++j)
        if (!std::isfinite(static_cast<double>(weights[i][j])))
          raise<NumericError>(what, ": non-finite weight at layer ", i, " index ", j, " (", weights[i][j], ")");
      for (std::size_t j = 0; j < biases[i].size(); ++j)
        if (!std::isfinite(static_cast<double>(biases[i][j])))
          raise<NumericError>(what, ": non-finite bias at layer ", i, " index ", j, " (", biases[i][j], ")");
    }
  }

  void set_zero() {
    for (auto& w : weights) std::fill(w.begin(), w.end(), T(0));
    for (auto& b : biases) std::fill(b.begin(), b.end(), T(0));
  }

  NetworkParams& operator+=(const NetworkParams& o) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (std::size_t j = 0; j < weights[i].size(); ++j) weights[i][j] += o.weights[i][j];
      for (std::size_t j = 0; j < biases[i].size(); ++j) biases[i][j] += o.biases[i][j];
    }
    return *this;
  }

  template <typename U>
  NetworkParams<U> cast() const {
    NetworkParams<U> r;
    r.layers = layers;
    r.receptive_field = receptive_field;
    r.feature_dim = feature_dim;
    r.in_channels = in_channels;
    for (const auto& w : weights) r.weights.emplace_back(w.begin(), w.end());
    for (const auto& b : biases) r.biases.emplace_back(b.begin(), b.end());
    return r;
  }

  friend bool operator==(const NetworkParams&, const NetworkParams&) = default;
};

template <typename T>
using NetworkGrads = NetworkParams<T>;

// Uniform in +-sqrt(3 / fan_in), zero biases (unit-variance preserving).
template <typename T = float>
NetworkParams<T> init_params(std::vector<LayerSpec> spec, std::uint64_t seed) {
  auto p = NetworkParams<T>::zeros(std::move(spec));
  Rng rng(seed);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    if (l.kind != LayerKind::conv) continue;
    const double bound = std::sqrt(3.0 / (static_cast<double>(l.in_channels) * l.kernel * l.kernel));
    for (auto& w : p.weights[i]) w = static_cast<T>(uniform_real(rng, -bound, bound));
  }
  return p;
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRow = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapRow = Eigen::Map<const RowMat<T>>;

template <typename T>
void tanh_into(const T* in, T* out, std::size_t n) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  Eigen::Map<Arr>(out, static_cast<Eigen::Index>(n)) = Eigen::Map<const Arr>(in, static_cast<Eigen::Index>(n)).tanh();
}

// Activations are stored channel-major over a batch: [C][N][H][W].
// Builds the (C*k*k) x (N*oh*ow) column matrix for output rows [oy0, oy0+oh).
template <typename T>
void im2col(const T* in, int channels, int batch, int h, int w, int k, int dil, int oy0, int oh, int ow, T* cols) {
  const std::size_t m = static_cast<std::size_t>(batch) * oh * ow;
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* dst = cols + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * m;
        for (int n = 0; n < batch; ++n)
          for (int oy = 0; oy < oh; ++oy) {
            const T* src = in + ((static_cast<std::size_t>(c) * batch + n) * h + oy0 + oy + ky * dil) * w + kx * dil;
            std::copy_n(src, ow, dst + (static_cast<std::size_t>(n) * oh + oy) * ow);
          }
      }
}

template <typename T>
void col2im_add(const T* cols, int channels, int batch, int h, int w, int k, int oh, int ow, T* in) {
  const std::size_t m = static_cast<std::size_t>(batch) * oh * ow;
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* src = cols + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * m;
        for (int n = 0; n < batch; ++n)
          for (int oy = 0; oy < oh; ++oy) {
            T* dst = in + ((static_cast<std::size_t>(c) * batch + n) * h + oy + ky) * w + kx;
            const T* s = src + (static_cast<std::size_t>(n) * oh + oy) * ow;
            for (int ox = 0; ox < ow; ++ox) dst[ox] += s[ox];
          }
      }
}

}  // namespace detail

// Per-layer activations of a batch of patches, kept for backprop.
template <typename T>
struct ForwardCache {
  int batch = 0;
  std::vector<int> side;                           // spatial side of acts[i]
  std::vector<std::vector<T>> acts;                // acts[0] input, acts[i+1] output of layer i
  std::vector<std::vector<std::uint32_t>> argmax;  // pool layers only

  bool empty() const noexcept { return acts.empty(); }

  // Feature vector of patch n.
  std::vector<T> feature(int n) const {
    const auto& out = acts.back();
    const int dim = static_cast<int>(out.size()) / batch;
    std::vector<T> f(static_cast<std::size_t>(dim));
    for (int c = 0; c < dim; ++c) f[c] = out[static_cast<std::size_t>(c) * batch + n];
    return f;
  }
};

// Runs a batch of patches, each stored contiguously as [C][rf][rf]. Reuses
// the storage already held by `cache`.
template <typename T>
void forward_batch_into(const NetworkParams<T>& params, std::span<const T> patches, int batch, ForwardCache<T>& cache) {
  const int rf = params.receptive_field;
  if (batch < 1) raise<ShapeError>("forward_batch: empty batch");
  if (patches.size() != params.patch_size() * static_cast<std::size_t>(batch))
    raise<ShapeError>("forward_batch: got ", patches.size(), " values, expected ", batch, " patches of ",
                      params.in_channels, "x", rf, "x", rf);
  const std::size_t nl = params.layers.size();
  cache.batch = batch;
  cache.acts.resize(nl + 1);
  cache.side.assign(nl + 1, 0);
  cache.argmax.resize(nl);
  const std::size_t plane = static_cast<std::size_t>(rf) * rf;
  auto& input = cache.acts[0];
  input.resize(patches.size());
  for (int n = 0; n < batch; ++n)
    for (int c = 0; c < params.in_channels; ++c)
      std::copy_n(patches.data() + (static_cast<std::size_t>(n) * params.in_channels + c) * plane, plane,
                  input.data() + (static_cast<std::size_t>(c) * batch + n) * plane);
  cache.side[0] = rf;

  thread_local std::vector<T> cols;
  for (std::size_t li = 0; li < nl; ++li) {
    const auto& l = params.layers[li];
    const auto& in = cache.acts[li];
    auto& out = cache.acts[li + 1];
    const int s = cache.side[li];
    int so = s;
    switch (l.kind) {
      case LayerKind::conv: {
        so = s - l.kernel + 1;
        const std::size_t kdim = static_cast<std::size_t>(l.in_channels) * l.kernel * l.kernel;
        const std::size_t m = static_cast<std::size_t>(batch) * so * so;
        cols.resize(kdim * m);
        detail::im2col(in.data(), l.in_channels, batch, s, s, l.kernel, 1, 0, so, so, cols.data());
        out.resize(static_cast<std::size_t>(l.out_channels) * m);
        detail::MapRow<T> om(out.data(), l.out_channels, static_cast<Eigen::Index>(m));
        om.noalias() = detail::CMapRow<T>(params.weights[li].data(), l.out_channels, static_cast<Eigen::Index>(kdim)) *
                       detail::CMapRow<T>(cols.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(m));
        for (int c = 0; c < l.out_channels; ++c) om.row(c).array() += params.biases[li][c];
        break;
      }
      case LayerKind::maxpool: {
        const int k = l.kernel;
        if (s % k != 0) raise<ShapeError>("maxpool layer ", li, ": side ", s, " not divisible by ", k);
        so = s / k;
        const std::size_t planes = static_cast<std::size_t>(l.in_channels) * batch;
        out.resize(planes * so * so);
        auto& am = cache.argmax[li];
        am.resize(out.size());
        for (std::size_t p = 0; p < planes; ++p) {
          const T* src = in.data() + p * s * s;
          for (int oy = 0; oy < so; ++oy)
            for (int ox = 0; ox < so; ++ox) {
              std::size_t best = static_cast<std::size_t>(oy * k) * s + ox * k;
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const std::size_t idx = static_cast<std::size_t>(oy * k + ky) * s + ox * k + kx;
                  if (src[idx] > src[best]) best = idx;
                }
              const std::size_t o = p * so * so + static_cast<std::size_t>(oy) * so + ox;
              out[o] = src[best];
              am[o] = static_cast<std::uint32_t>(p * s * s + best);
            }
        }
        break;
      }
      case LayerKind::tanh:
        out.resize(in.size());
        detail::tanh_into(in.data(), out.data(), in.size());
        break;
    }
    cache.side[li + 1] = so;
  }
}

template <typename T>
ForwardCache<T> forward_batch(const NetworkParams<T>& params, std::span<const T> patches, int batch) {
  ForwardCache<T> cache;
  forward_batch_into(params, patches, batch, cache);
  return cache;
}

// D(p) for one patch laid out [C][rf][rf].
template <typename T>
std::vector<T> forward(const NetworkParams<T>& params, std::span<const T> patch) {
  if (patch.size() != params.patch_size())
    raise<ShapeError>("forward: patch has ", patch.size(), " values, expected ", params.patch_size());
  return forward_batch(params, patch, 1).feature(0);
}

// Backpropagates upstream gradients (one F-vector per patch, [N][F]) through
// the cached batch. Gradients of all patches are summed, which is what weight
// sharing between the Siamese branches requires.
template <typename T>
NetworkGrads<T> backward(const NetworkParams<T>& params, const ForwardCache<T>& cache,
                         std::span<const T> upstream) {
  if (cache.empty()) raise<Error>("backward: no cached activations (run forward_batch first)");
  const int batch = cache.batch;
  const int dim = params.feature_dim;
  if (upstream.size() != static_cast<std::size_t>(batch) * dim)
    raise<ShapeError>("backward: upstream gradient has ", upstream.size(), " values, expected ", batch * dim);
  auto grads = NetworkGrads<T>::zeros(params.layers);

  thread_local std::vector<T> dy, cols, dcols, dx;
  dy.resize(upstream.size());
  for (int n = 0; n < batch; ++n)
    for (int c = 0; c < dim; ++c)
      dy[static_cast<std::size_t>(c) * batch + n] = upstream[static_cast<std::size_t>(n) * dim + c];

  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const auto& l = params.layers[li];
    const auto& in = cache.acts[li];
    const auto& out = cache.acts[li + 1];
    const int s = cache.side[li];
    const int so = cache.side[li + 1];
    switch (l.kind) {
      case LayerKind::tanh:
        for (std::size_t i = 0; i < dy.size(); ++i) dy[i] *= T(1) - out[i] * out[i];
        continue;
      case LayerKind::maxpool: {
        dx.assign(in.size(), T(0));
        const auto& am = cache.argmax[li];
        for (std::size_t i = 0; i < dy.size(); ++i) dx[am[i]] += dy[i];
        dy.swap(dx);
        continue;
      }
      case LayerKind::conv: {
        const std::size_t kdim = static_cast<std::size_t>(l.in_channels) * l.kernel * l.kernel;
        const std::size_t m = static_cast<std::size_t>(batch) * so * so;
        cols.resize(kdim * m);
        detail::im2col(in.data(), l.in_channels, batch, s, s, l.kernel, 1, 0, so, so, cols.data());
        detail::CMapRow<T> dym(dy.data(), l.out_channels, static_cast<Eigen::Index>(m));
        detail::CMapRow<T> cm(cols.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(m));
        detail::MapRow<T> dw(grads.weights[li].data(), l.out_channels, static_cast<Eigen::Index>(kdim));
        dw.noalias() += dym * cm.transpose();
        // Plain loop: a vectorized reduction would make the summation order
        // depend on buffer alignment and break bit-exact reruns.
        for (int c = 0; c < l.out_channels; ++c) {
          const T* row = dy.data() + static_cast<std::size_t>(c) * m;
          T acc = 0;
          for (std::size_t i = 0; i < m; ++i) acc += row[i];
          grads.biases[li][c] += acc;
        }
        if (li == 0) continue;
        dcols.resize(kdim * m);
        detail::MapRow<T>(dcols.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(m)).noalias() =
            detail::CMapRow<T>(params.weights[li].data(), l.out_channels, static_cast<Eigen::Index>(kdim))
                .transpose() *
            dym;
        dx.assign(in.size(), T(0));
        detail::col2im_add(dcols.data(), l.in_channels, batch, s, s, l.kernel, so, so, dx.data());
        dy.swap(dx);
        continue;
      }
    }
  }
  return grads;
}

// Dense evaluation over a whole image: every pixel x gets D(patch whose
// top-left corner is x - rf/2). Pooling strides are replaced by dilation of
// all later layers, so every stride phase is computed and the output stays at
// input resolution. Pixels whose patch leaves the image see clamp-to-edge
// padding.
template <typename T>
FeatureMap forward_dense(const NetworkParams<T>& params, const Image& image) {
  const int rf = params.receptive_field;
  if (params.in_channels != 1) raise<ShapeError>("forward_dense: image input needs a 1-channel network");
  if (image.width < rf || image.height < rf)
    raise<ShapeError>("forward_dense: image ", image.width, "x", image.height, " smaller than receptive field ", rf);
  const int lo = rf / 2;
  int w = image.width + rf - 1;
  int h = image.height + rf - 1;
  std::vector<T> act(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) act[static_cast<std::size_t>(y) * w + x] = static_cast<T>(image.clamped(x - lo, y - lo));

  constexpr std::size_t kMaxCols = std::size_t{1} << 22;
  int dil = 1;
  std::vector<T> cols, out;
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    const auto& l = params.layers[li];
    const int reach = (l.kernel - 1) * dil;
    switch (l.kind) {
      case LayerKind::conv: {
        const int oh = h - reach, ow = w - reach;
        const std::size_t kdim = static_cast<std::size_t>(l.in_channels) * l.kernel * l.kernel;
        out.assign(static_cast<std::size_t>(l.out_channels) * oh * ow, T(0));
        const int band = std::max(1, static_cast<int>(kMaxCols / (kdim * ow)));
        detail::CMapRow<T> wm(params.weights[li].data(), l.out_channels, static_cast<Eigen::Index>(kdim));
        for (int y0 = 0; y0 < oh; y0 += band) {
          const int rows = std::min(band, oh - y0);
          const std::size_t m = static_cast<std::size_t>(rows) * ow;
          cols.resize(kdim * m);
          detail::im2col(act.data(), l.in_channels, 1, h, w, l.kernel, dil, y0, rows, ow, cols.data());
          using Strided = Eigen::Map<detail::RowMat<T>, 0, Eigen::OuterStride<>>;
          Strided om(out.data() + static_cast<std::size_t>(y0) * ow, l.out_channels, static_cast<Eigen::Index>(m),
                     Eigen::OuterStride<>(static_cast<Eigen::Index>(oh) * ow));
          om.noalias() = wm * detail::CMapRow<T>(cols.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(m));
          for (int c = 0; c < l.out_channels; ++c) om.row(c).array() += params.biases[li][c];
        }
        act.swap(out);
        h = oh;
        w = ow;
        break;
      }
      case LayerKind::maxpool: {
        const int oh = h - reach, ow = w - reach;
        out.resize(static_cast<std::size_t>(l.in_channels) * oh * ow);
        for (int c = 0; c < l.in_channels; ++c) {
          const T* src = act.data() + static_cast<std::size_t>(c) * h * w;
          T* dst = out.data() + static_cast<std::size_t>(c) * oh * ow;
          for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
              T best = src[static_cast<std::size_t>(y) * w + x];
              for (int ky = 0; ky < l.kernel; ++ky)
                for (int kx = 0; kx < l.kernel; ++kx)
                  best = std::max(best, src[static_cast<std::size_t>(y + ky * dil) * w + x + kx * dil]);
              dst[static_cast<std::size_t>(y) * ow + x] = best;
            }
        }
        act.swap(out);
        h = oh;
        w = ow;
        dil *= l.stride;
        break;
      }
      case LayerKind::tanh:
        detail::tanh_into(act.data(), act.data(), act.size());
        break;
    }
  }

  FeatureMap fm(image.width, image.height, params.feature_dim, rf);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < params.feature_dim; ++c)
      fm.values[p * params.feature_dim + c] = static_cast<float>(act[c * plane + p]);
  return fm;
}

// Learning rate interpolated linearly in log space from lr_start (batch 0)
// to lr_end (last batch).
struct LrSchedule {
  double lr_start = 0.004;
  double lr_end = 0.0004;
  std::size_t total_batches = 1;

  void validate() const {
    if (!(lr_end > 0.0) || !(lr_start >= lr_end))
      raise<Error>("learning-rate schedule needs lr_start >= lr_end > 0 (got ", lr_start, ", ", lr_end, ")");
    if (total_batches < 1) raise<Error>("learning-rate schedule needs at least one batch");
  }

  double rate(std::size_t batch_index) const {
    if (total_batches <= 1) return lr_start;
    const double frac = static_cast<double>(batch_index) / static_cast<double>(total_batches - 1);
    return std::exp(std::log(lr_start) + frac * (std::log(lr_end) - std::log(lr_start)));
  }
};

struct SgdOptions {
  double momentum = 0.0;
  double weight_decay = 0.0;
};

// Plain SGD with optional momentum / L2 weight decay (both off by default).
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(LrSchedule schedule, SgdOptions options = {}) : schedule_(schedule), options_(options) {
    schedule_.validate();
  }

  const LrSchedule& schedule() const noexcept { return schedule_; }

  void step(NetworkParams<T>& params, const NetworkGrads<T>& grads, std::size_t batch_index) {
    if (batch_index >= schedule_.total_batches)
      raise<Error>("sgd step ", batch_index, " beyond schedule of ", schedule_.total_batches, " batches");
    grads.check_finite("sgd gradient");
    const T lr = static_cast<T>(schedule_.rate(batch_index));
    const bool use_velocity = options_.momentum != 0.0;
    if (use_velocity && velocity_.layers.empty()) velocity_ = NetworkGrads<T>::zeros(params.layers);
    const T mu = static_cast<T>(options_.momentum);
    const T wd = static_cast<T>(options_.weight_decay);
    auto update = [&](std::vector<T>& p, const std::vector<T>& g, std::vector<T>* vel, bool decay) {
      for (std::size_t j = 0; j < p.size(); ++j) {
        T d = g[j] + (decay ? wd * p[j] : T(0));
        if (vel) {
          (*vel)[j] = mu * (*vel)[j] + d;
          d = (*vel)[j];
        }
        p[j] -= lr * d;
      }
    };
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
      update(params.weights[i], grads.weights[i], use_velocity ? &velocity_.weights[i] : nullptr, wd != T(0));
      update(params.biases[i], grads.biases[i], use_velocity ? &velocity_.biases[i] : nullptr, false);
    }
  }

 private:
  LrSchedule schedule_;
  SgdOptions options_;
  NetworkGrads<T> velocity_;
};

// params <- params - lr(batch_index) * grads.
template <typename T>
void sgd_step(NetworkParams<T>& params, const NetworkGrads<T>& grads, std::size_t batch_index,
              const LrSchedule& schedule) {
  SgdOptimizer<T>(schedule).step(params, grads, batch_index);
}

}  // namespace cnnflow
