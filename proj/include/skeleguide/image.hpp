#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <csetjmp>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "skeleguide/errors.hpp"

namespace skeleguide {

using Rgb = std::array<float, 3>;

/// 8-bit RGB triple helper; palette and scene colors are authored in this form.
constexpr Rgb rgb8(int r, int g, int b) {
  return {static_cast<float>(r) / 255.0f, static_cast<float>(g) / 255.0f,
          static_cast<float>(b) / 255.0f};
}

/// Row-major HWC float image with values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, float fill = 0.0f)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::size_t index(int x, int y) const {
    return (static_cast<std::size_t>(y) * width + x) * 3;
  }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

  Rgb pixel(int x, int y) const {
    const auto i = index(x, y);
    return {data[i], data[i + 1], data[i + 2]};
  }
  void set(int x, int y, const Rgb& c) {
    const auto i = index(x, y);
    data[i] = c[0];
    data[i + 1] = c[1];
    data[i + 2] = c[2];
  }

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Binary per-pixel mask.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}

  bool at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
  void mark(int x, int y) { bits[static_cast<std::size_t>(y) * width + x] = 1; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }

  Mask dilated(int radius) const {
    Mask out(width, height);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        if (!at(x, y)) continue;
        for (int dy = -radius; dy <= radius; ++dy)
          for (int dx = -radius; dx <= radius; ++dx) {
            if (dx * dx + dy * dy > radius * radius) continue;
            const int xx = x + dx, yy = y + dy;
            if (xx >= 0 && yy >= 0 && xx < width && yy < height) out.mark(xx, yy);
          }
      }
    return out;
  }

  friend bool operator==(const Mask&, const Mask&) = default;
};

inline std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::floor(c * 255.0f + 0.5f));
}

/// Rounds every channel to the nearest k/255 so PNG roundtrips are exact.
inline void quantize(Image& img) {
  for (auto& v : img.data) v = static_cast<float>(to_byte(v)) / 255.0f;
}

namespace detail {

struct PngReadCursor {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t offset;
};

inline void png_read_mem(png_structp png, png_bytep out, png_size_t n) {
  auto* cur = static_cast<PngReadCursor*>(png_get_io_ptr(png));
  if (n > cur->size - cur->offset) png_error(png, "truncated PNG stream");
  std::memcpy(out, cur->data + cur->offset, n);
  cur->offset += n;
}

inline void png_write_mem(png_structp png, png_bytep in, png_size_t n) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), in, in + n);
}

inline void png_flush_noop(png_structp) {}

inline void png_warning_ignore(png_structp, png_const_charp) {}

}  // namespace detail

/// Encodes as 8-bit RGB PNG. Output bytes depend only on the pixel values.
inline std::vector<std::uint8_t> encode_png(const Image& img) {
  std::vector<std::uint8_t> out;
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(img.width) * img.height * 3);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = to_byte(img.data[i]);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, detail::png_warning_ignore);
  if (!png) throw Error("png: cannot allocate writer");
  png_infop info = png_create_info_struct(png);
  // libpng reports errors by longjmp; every C++ object above outlives this frame.
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("png: encode failed");
  }
  png_set_write_fn(png, &out, detail::png_write_mem, detail::png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) png_write_row(png, rows.data() + static_cast<std::size_t>(y) * img.width * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

/// Decodes any PNG libpng understands into RGB; alpha is dropped, 16-bit is reduced.
inline Image decode_png(const std::uint8_t* bytes, std::size_t size) {
  if (size < 8 || png_sig_cmp(bytes, 0, 8) != 0) throw Error("png: not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, detail::png_warning_ignore);
  if (!png) throw Error("png: cannot allocate reader");
  png_infop info = png_create_info_struct(png);
  detail::PngReadCursor cursor{bytes, size, 0};
  std::vector<std::uint8_t> pixels;
  std::vector<png_bytep> row_ptrs;
  png_uint_32 w = 0, h = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("png: decode failed");
  }
  png_set_read_fn(png, &cursor, detail::png_read_mem);
  png_read_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  if (w == 0 || h == 0 || w > 8192 || h > 8192) png_error(png, "unsupported dimensions");
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);
  if (png_get_channels(png, info) != 3) png_error(png, "unexpected channel count");
  pixels.resize(static_cast<std::size_t>(w) * h * 3);
  row_ptrs.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) row_ptrs[y] = pixels.data() + static_cast<std::size_t>(y) * w * 3;
  png_read_image(png, row_ptrs.data());
  png_destroy_read_struct(&png, &info, nullptr);
  Image img(static_cast<int>(w), static_cast<int>(h));
  for (std::size_t i = 0; i < pixels.size(); ++i) img.data[i] = static_cast<float>(pixels[i]) / 255.0f;
  return img;
}

inline Image decode_png(const std::vector<std::uint8_t>& bytes) { return decode_png(bytes.data(), bytes.size()); }

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path, "cannot open for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError(path, "write failed");
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path, "cannot open for reading");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_png(const std::string& path, const Image& img) { write_bytes(path, encode_png(img)); }

inline Image read_png(const std::string& path) {
  const auto bytes = read_bytes(path);
  try {
    return decode_png(bytes);
  } catch (const Error& e) {
    throw IoError(path, e.what());
  }
}

}  // namespace skeleguide
