#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "skeleguide/errors.hpp"
#include "skeleguide/image.hpp"

namespace skeleguide {

/// Patch-token latent: row-major [n_tokens x dim] with n_tokens = (H/p)(W/p)
/// and dim = 3 p^2. Tokens are ordered by patch row then patch column; inside
/// a token the layout is (dy, dx, channel).
template <class T>
struct LatentGrid {
  int height = 0;
  int width = 0;
  int patch = 8;
  std::vector<T> tokens;

  LatentGrid() = default;
  LatentGrid(int h, int w, int p, T fill = T(0)) : height(h), width(w), patch(p) {
    check_dims(h, w, p);
    tokens.assign(static_cast<std::size_t>(h) * w * 3, fill);
  }

  int grid_h() const { return height / patch; }
  int grid_w() const { return width / patch; }
  int n_tokens() const { return grid_h() * grid_w(); }
  int dim() const { return 3 * patch * patch; }

  static void check_dims(int h, int w, int p) {
    if (p <= 0 || h <= 0 || w <= 0) throw ShapeError("latent dimensions must be positive");
    if (h % p != 0 || w % p != 0)
      throw ShapeError("image " + std::to_string(w) + "x" + std::to_string(h) + " not divisible by patch " +
                       std::to_string(p));
  }

  void validate() const {
    check_dims(height, width, patch);
    if (tokens.size() != static_cast<std::size_t>(n_tokens()) * dim())
      throw ShapeError("latent holds " + std::to_string(tokens.size()) + " values, expected " +
                       std::to_string(n_tokens() * dim()));
  }

  friend bool operator==(const LatentGrid&, const LatentGrid&) = default;
};

/// Index of pixel channel (x, y, c) inside the token buffer.
inline std::size_t latent_offset(int x, int y, int c, int width, int patch) {
  const int gw = width / patch;
  const int token = (y / patch) * gw + (x / patch);
  const int inner = ((y % patch) * patch + (x % patch)) * 3 + c;
  return static_cast<std::size_t>(token) * (3 * patch * patch) + inner;
}

/// Affine encoder on raw HWC values: token = 2 * pixel - 1, patch-flattened.
template <class T>
std::vector<T> encode_values(const std::vector<T>& hwc, int height, int width, int patch) {
  LatentGrid<T>::check_dims(height, width, patch);
  if (hwc.size() != static_cast<std::size_t>(height) * width * 3) throw ShapeError("pixel buffer size mismatch");
  std::vector<T> out(hwc.size());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c)
        out[latent_offset(x, y, c, width, patch)] = T(2) * hwc[(static_cast<std::size_t>(y) * width + x) * 3 + c] - T(1);
  return out;
}

/// Inverse affine map without clamping: pixel = (token + 1) / 2.
template <class T>
std::vector<T> decode_values(const std::vector<T>& tokens, int height, int width, int patch) {
  LatentGrid<T>::check_dims(height, width, patch);
  if (tokens.size() != static_cast<std::size_t>(height) * width * 3) throw ShapeError("token buffer size mismatch");
  std::vector<T> out(tokens.size());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c)
        out[(static_cast<std::size_t>(y) * width + x) * 3 + c] = (tokens[latent_offset(x, y, c, width, patch)] + T(1)) / T(2);
  return out;
}

template <class T = float>
LatentGrid<T> encode_latent(const Image& img, int patch = 8) {
  LatentGrid<T> out;
  out.height = img.height;
  out.width = img.width;
  out.patch = patch;
  out.tokens = encode_values(std::vector<T>(img.data.begin(), img.data.end()), img.height, img.width, patch);
  return out;
}

/// Exact inverse of encode_latent followed by a clamp to [0, 1].
template <class T>
Image decode_latent(const LatentGrid<T>& grid) {
  grid.validate();
  const auto values = decode_values(grid.tokens, grid.height, grid.width, grid.patch);
  Image img(grid.width, grid.height);
  for (std::size_t i = 0; i < values.size(); ++i) img.data[i] = static_cast<float>(std::clamp(values[i], T(0), T(1)));
  return img;
}

}  // namespace skeleguide
