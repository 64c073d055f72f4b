#pragma once

// File formats: PGM (P5) and grayscale PNG images, Middlebury .flo and KITTI
// 16-bit PNG flow, SFNET1 checkpoints and SFMAP1 feature dumps.

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "cnnflow/common.hpp"
#include "cnnflow/image.hpp"
#include "cnnflow/tensor_net.hpp"

namespace cnnflow {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace fs = std::filesystem;

inline std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise<Error>("cannot open '", path.string(), "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& path, const void* data, std::size_t size) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise<Error>("cannot open '", path.string(), "' for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) raise<Error>("write to '", path.string(), "' failed");
}

inline void write_file(const fs::path& path, const std::string& text) { write_file(path, text.data(), text.size()); }

namespace detail {

struct ByteReader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
  std::string what;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) raise<FormatError>(what, ": truncated file (need ", n, " bytes at offset ", pos, ")");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
};

template <typename T>
void put(std::string& out, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.append(b, sizeof(T));
}

inline std::string lower_ext(const fs::path& p) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e;
}

}  // namespace detail

// Decoded raster at its native depth; `maxval` is 255 or 65535 for PNG.
struct LoadedImage {
  Image image;  // samples / maxval, in [0, 1]
  int maxval = 255;
};

// ---- PGM --------------------------------------------------------------

inline LoadedImage decode_pgm(const std::vector<std::uint8_t>& buf, const std::string& name) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < buf.size()) {
      if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(buf[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_ws();
    if (pos >= buf.size() || !std::isdigit(buf[pos])) raise<FormatError>(name, ": malformed PGM header");
    long v = 0;
    while (pos < buf.size() && std::isdigit(buf[pos])) {
      v = v * 10 + (buf[pos++] - '0');
      if (v > 1 << 20) raise<FormatError>(name, ": PGM header value too large");
    }
    return static_cast<int>(v);
  };
  if (buf.size() < 2 || buf[0] != 'P') raise<FormatError>(name, ": not a PGM file");
  if (buf[1] != '5') raise<FormatError>(name, ": unsupported Netpbm format P", static_cast<char>(buf[1]), " (only binary P5 grayscale)");
  pos = 2;
  const int w = number(), h = number(), maxval = number();
  if (maxval < 1 || maxval > 65535) raise<FormatError>(name, ": PGM maxval ", maxval, " out of range");
  if (pos >= buf.size() || !std::isspace(buf[pos])) raise<FormatError>(name, ": malformed PGM header");
  ++pos;
  const std::size_t bps = maxval > 255 ? 2 : 1;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (buf.size() - pos < n * bps) raise<FormatError>(name, ": PGM pixel data truncated");
  LoadedImage out{Image(w, h), maxval};
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned s = bps == 1 ? buf[pos + i] : (static_cast<unsigned>(buf[pos + 2 * i]) << 8) | buf[pos + 2 * i + 1];
    out.image.data[i] = static_cast<float>(s) / static_cast<float>(maxval);
  }
  return out;
}

inline std::vector<std::uint16_t> quantize(const Image& img, int maxval) {
  std::vector<std::uint16_t> q(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(static_cast<double>(img.data[i]), 0.0, 1.0);
    q[i] = static_cast<std::uint16_t>(std::lround(v * maxval));
  }
  return q;
}

inline std::string encode_pgm(const Image& img, int maxval = 255) {
  if (maxval < 1 || maxval > 65535) raise<Error>("PGM maxval must be in [1, 65535]");
  std::string out = detail::concat("P5\n", img.width, " ", img.height, "\n", maxval, "\n");
  for (auto s : quantize(img, maxval)) {
    if (maxval > 255) out.push_back(static_cast<char>(s >> 8));
    out.push_back(static_cast<char>(s & 0xff));
  }
  return out;
}

// ---- PNG (libpng) -----------------------------------------------------

struct PngRaster {
  int width = 0, height = 0, channels = 0, bit_depth = 0;
  std::vector<std::uint16_t> samples;  // interleaved
};

inline PngRaster read_png(const fs::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
  if (!fp) raise<Error>("cannot open '", path.string(), "' for reading");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) raise<FormatError>(path.string(), ": not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) raise<Error>("libpng initialisation failed");
  PngRaster r;
  std::vector<png_bytep> rows;
  std::vector<png_byte> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise<FormatError>(path.string(), ": corrupt PNG");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  r.width = static_cast<int>(png_get_image_width(png, info));
  r.height = static_cast<int>(png_get_image_height(png, info));
  r.bit_depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && r.bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (r.bit_depth == 16) png_set_swap(png);
  png_read_update_info(png, info);
  r.channels = png_get_channels(png, info);
  r.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  pixels.resize(rowbytes * r.height);
  rows.resize(r.height);
  for (int y = 0; y < r.height; ++y) rows[y] = pixels.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  const std::size_t n = static_cast<std::size_t>(r.width) * r.height * r.channels;
  r.samples.resize(n);
  if (r.bit_depth == 16) {
    std::memcpy(r.samples.data(), pixels.data(), n * 2);
  } else {
    for (std::size_t i = 0; i < n; ++i) r.samples[i] = pixels[i];
  }
  return r;
}

inline void write_png(const fs::path& path, const PngRaster& r) {
  if (r.channels != 1 && r.channels != 3) raise<Error>("write_png: only gray or RGB");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) raise<Error>("cannot open '", path.string(), "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) raise<Error>("libpng initialisation failed");
  const std::size_t bps = r.bit_depth == 16 ? 2 : 1;
  const std::size_t rowbytes = static_cast<std::size_t>(r.width) * r.channels * bps;
  std::vector<png_byte> pixels(rowbytes * r.height);
  for (std::size_t i = 0; i < r.samples.size(); ++i) {
    if (bps == 2) {
      pixels[2 * i] = static_cast<png_byte>(r.samples[i] >> 8);
      pixels[2 * i + 1] = static_cast<png_byte>(r.samples[i] & 0xff);
    } else {
      pixels[i] = static_cast<png_byte>(r.samples[i]);
    }
  }
  std::vector<png_bytep> rows(r.height);
  for (int y = 0; y < r.height; ++y) rows[y] = pixels.data() + rowbytes * y;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    raise<Error>(path.string(), ": PNG write failed");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, r.width, r.height, r.bit_depth, r.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// ---- images -----------------------------------------------------------

inline LoadedImage load_image(const fs::path& path) {
  const auto ext = detail::lower_ext(path);
  if (ext == ".pgm") return decode_pgm(read_file(path), path.string());
  if (ext == ".png") {
    const auto r = read_png(path);
    if (r.channels == 3 && r.bit_depth == 16)
      raise<FormatError>(path.string(), ": 16-bit 3-channel PNG is a KITTI-style flow file, not a grayscale image");
    if (r.channels != 1)
      raise<FormatError>(path.string(), ": unsupported PNG with ", r.channels, " channels (only PNG-gray)");
    const int maxval = r.bit_depth == 16 ? 65535 : 255;
    LoadedImage out{Image(r.width, r.height), maxval};
    for (std::size_t i = 0; i < r.samples.size(); ++i) out.image.data[i] = static_cast<float>(r.samples[i]) / maxval;
    return out;
  }
  raise<FormatError>(path.string(), ": unsupported image format '", ext, "' (PGM or PNG-gray)");
}

// Values are clamped to [0, 1] and quantized to maxval (255 or 65535).
inline void save_image(const fs::path& path, const Image& img, int maxval = 255) {
  const auto ext = detail::lower_ext(path);
  if (ext == ".pgm") {
    write_file(path, encode_pgm(img, maxval));
    return;
  }
  if (ext == ".png") {
    if (maxval != 255 && maxval != 65535) raise<Error>("PNG output needs maxval 255 or 65535");
    PngRaster r{img.width, img.height, 1, maxval == 255 ? 8 : 16, quantize(img, maxval)};
    write_png(path, r);
    return;
  }
  raise<FormatError>(path.string(), ": unsupported image format '", ext, "' (PGM or PNG-gray)");
}

inline Image mask_image(const Mask& m) {
  Image img(m.width, m.height);
  for (std::size_t i = 0; i < m.data.size(); ++i) img.data[i] = m.data[i] ? 1.0f : 0.0f;
  return img;
}

inline Mask image_mask(const Image& img) {
  Mask m(img.width, img.height);
  for (std::size_t i = 0; i < img.data.size(); ++i) m.data[i] = img.data[i] >= 0.5f ? 1 : 0;
  return m;
}

// ---- flow -------------------------------------------------------------

inline constexpr float kFloMagic = 202021.25f;
inline constexpr float kFloSentinel = 1e9f;

inline std::string encode_flo(const FlowField& f, bool sentinel_invalid = false) {
  std::string out;
  out.reserve(12 + f.size() * 8);
  detail::put(out, kFloMagic);
  detail::put(out, static_cast<std::int32_t>(f.width));
  detail::put(out, static_cast<std::int32_t>(f.height));
  for (std::size_t i = 0; i < f.size(); ++i) {
    const bool inv = sentinel_invalid && !f.valid[i];
    detail::put(out, inv ? kFloSentinel : f.u[i]);
    detail::put(out, inv ? kFloSentinel : f.v[i]);
  }
  return out;
}

// Values at or beyond the 1e9 sentinel load as invalid pixels.
inline FlowField decode_flo(const std::vector<std::uint8_t>& buf, const std::string& name) {
  detail::ByteReader rd{buf, 0, name};
  const float magic = rd.get<float>();
  if (magic != kFloMagic) raise<FormatError>(name, ": bad .flo magic ", magic, " (expected 202021.25)");
  const auto w = rd.get<std::int32_t>(), h = rd.get<std::int32_t>();
  if (w < 0 || h < 0 || static_cast<std::int64_t>(w) * h > (std::int64_t{1} << 28))
    raise<FormatError>(name, ": implausible .flo size ", w, "x", h);
  FlowField f(w, h);
  rd.need(f.size() * 8);
  for (std::size_t i = 0; i < f.size(); ++i) {
    f.u[i] = rd.get<float>();
    f.v[i] = rd.get<float>();
    if (std::abs(f.u[i]) >= kFloSentinel || std::abs(f.v[i]) >= kFloSentinel) f.valid[i] = 0;
  }
  return f;
}

// KITTI: 16-bit RGB, channel = 2^15 + 64 * value, third channel = validity.
inline PngRaster encode_kitti_flow(const FlowField& f) {
  PngRaster r{f.width, f.height, 3, 16, std::vector<std::uint16_t>(f.size() * 3)};
  auto enc = [](float v) {
    return static_cast<std::uint16_t>(std::clamp(std::lround(v * 64.0 + 32768.0), 0L, 65535L));
  };
  for (std::size_t i = 0; i < f.size(); ++i) {
    r.samples[3 * i] = f.valid[i] ? enc(f.u[i]) : 0;
    r.samples[3 * i + 1] = f.valid[i] ? enc(f.v[i]) : 0;
    r.samples[3 * i + 2] = f.valid[i] ? 1 : 0;
  }
  return r;
}

inline FlowField decode_kitti_flow(const PngRaster& r, const std::string& name) {
  if (r.channels == 1 && r.bit_depth == 16)
    raise<FormatError>(name, ": single-channel 16-bit PNG looks like a KITTI disparity map, not a flow file");
  if (r.channels != 3 || r.bit_depth != 16)
    raise<FormatError>(name, ": KITTI flow needs a 16-bit 3-channel PNG (got ", r.channels, " channels, ", r.bit_depth,
                       "-bit)");
  FlowField f(r.width, r.height);
  for (std::size_t i = 0; i < f.size(); ++i) {
    f.u[i] = static_cast<float>((static_cast<double>(r.samples[3 * i]) - 32768.0) / 64.0);
    f.v[i] = static_cast<float>((static_cast<double>(r.samples[3 * i + 1]) - 32768.0) / 64.0);
    f.valid[i] = r.samples[3 * i + 2] > 0 ? 1 : 0;
  }
  return f;
}

inline FlowField load_flow(const fs::path& path) {
  const auto ext = detail::lower_ext(path);
  if (ext == ".flo") return decode_flo(read_file(path), path.string());
  if (ext == ".png") return decode_kitti_flow(read_png(path), path.string());
  raise<FormatError>(path.string(), ": unsupported flow format '", ext, "' (.flo or KITTI .png)");
}

inline void save_flow(const fs::path& path, const FlowField& f, bool sentinel_invalid = false) {
  const auto ext = detail::lower_ext(path);
  if (ext == ".flo") {
    write_file(path, encode_flo(f, sentinel_invalid));
  } else if (ext == ".png") {
    write_png(path, encode_kitti_flow(f));
  } else {
    raise<FormatError>(path.string(), ": unsupported flow format '", ext, "' (.flo or KITTI .png)");
  }
}

// ---- checkpoints ------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "SFNET1\n";

template <typename T>
std::string encode_checkpoint(const NetworkParams<T>& p) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  detail::put(out, static_cast<std::uint32_t>(p.layers.size()));
  for (const auto& l : p.layers) {
    detail::put(out, static_cast<std::uint32_t>(l.kind));
    detail::put(out, static_cast<std::uint32_t>(l.kernel));
    detail::put(out, static_cast<std::uint32_t>(l.stride));
    detail::put(out, static_cast<std::uint32_t>(l.in_channels));
    detail::put(out, static_cast<std::uint32_t>(l.out_channels));
  }
  p.for_each([&](const T& v) { detail::put(out, static_cast<float>(v)); });
  return out;
}

inline NetworkParams<float> decode_checkpoint(const std::vector<std::uint8_t>& buf, const std::string& name) {
  constexpr std::size_t mlen = sizeof(kCheckpointMagic) - 1;
  if (buf.size() < mlen || std::memcmp(buf.data(), kCheckpointMagic, mlen) != 0)
    raise<FormatError>(name, ": not an SFNET1 checkpoint");
  detail::ByteReader rd{buf, mlen, name};
  const auto count = rd.get<std::uint32_t>();
  if (count > 1024) raise<FormatError>(name, ": implausible layer count ", count);
  std::vector<LayerSpec> layers;
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerSpec l;
    const auto kind = rd.get<std::uint32_t>();
    if (kind < 1 || kind > 3) raise<FormatError>(name, ": unknown layer kind code ", kind);
    l.kind = static_cast<LayerKind>(kind);
    l.kernel = static_cast<int>(rd.get<std::uint32_t>());
    l.stride = static_cast<int>(rd.get<std::uint32_t>());
    l.in_channels = static_cast<int>(rd.get<std::uint32_t>());
    l.out_channels = static_cast<int>(rd.get<std::uint32_t>());
    layers.push_back(l);
  }
  NetworkParams<float> p;
  try {
    p = NetworkParams<float>::zeros(std::move(layers));
  } catch (const Error& e) {
    raise<FormatError>(name, ": invalid architecture: ", e.what());
  }
  rd.need(p.parameter_count() * 4);
  p.for_each([&](float& v) { v = rd.get<float>(); });
  if (rd.pos != buf.size()) raise<FormatError>(name, ": ", buf.size() - rd.pos, " trailing bytes after parameters");
  return p;
}

template <typename T>
void save_checkpoint(const fs::path& path, const NetworkParams<T>& p) {
  write_file(path, encode_checkpoint(p));
}

inline NetworkParams<float> load_checkpoint(const fs::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

// ---- feature maps -----------------------------------------------------

inline constexpr char kFeatureMagic[] = "SFMAP1\n";

inline std::string encode_featuremap(const FeatureMap& fm) {
  std::string out(kFeatureMagic, sizeof(kFeatureMagic) - 1);
  detail::put(out, static_cast<std::uint32_t>(fm.width));
  detail::put(out, static_cast<std::uint32_t>(fm.height));
  detail::put(out, static_cast<std::uint32_t>(fm.dim));
  out.append(reinterpret_cast<const char*>(fm.values.data()), fm.values.size() * sizeof(float));
  return out;
}

// The dump carries no receptive field; the caller supplies it.
inline FeatureMap decode_featuremap(const std::vector<std::uint8_t>& buf, const std::string& name,
                                    int receptive_field = 1) {
  constexpr std::size_t mlen = sizeof(kFeatureMagic) - 1;
  if (buf.size() < mlen || std::memcmp(buf.data(), kFeatureMagic, mlen) != 0)
    raise<FormatError>(name, ": not an SFMAP1 feature dump");
  detail::ByteReader rd{buf, mlen, name};
  const auto w = rd.get<std::uint32_t>(), h = rd.get<std::uint32_t>(), f = rd.get<std::uint32_t>();
  if (static_cast<std::uint64_t>(w) * h * f > (std::uint64_t{1} << 32)) raise<FormatError>(name, ": implausible size");
  FeatureMap fm(static_cast<int>(w), static_cast<int>(h), static_cast<int>(f), receptive_field);
  rd.need(fm.values.size() * 4);
  std::memcpy(fm.values.data(), buf.data() + rd.pos, fm.values.size() * 4);
  return fm;
}

inline void save_featuremap(const fs::path& path, const FeatureMap& fm) { write_file(path, encode_featuremap(fm)); }

inline FeatureMap load_featuremap(const fs::path& path, int receptive_field = 1) {
  return decode_featuremap(read_file(path), path.string(), receptive_field);
}

}  // namespace cnnflow
