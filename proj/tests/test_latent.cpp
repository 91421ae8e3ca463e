#include <gtest/gtest.h>

#include <cmath>

#include "skeleguide/latent.hpp"
#include "skeleguide/rng.hpp"

using namespace skeleguide;

namespace {

Image random_image(Rng& rng, int w, int h) {
  Image img(w, h);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

}  // namespace

TEST(EncodeLatent, MidGrayMapsToZero) {
  Image img(64, 64);
  std::fill(img.data.begin(), img.data.end(), 0.5f);
  const auto z = encode_latent(img);
  for (float v : z.tokens) EXPECT_EQ(v, 0.0f);
}

TEST(EncodeLatent, TokenShape) {
  const auto z = encode_latent(Image(64, 64));
  EXPECT_EQ(z.n_tokens(), 64);
  EXPECT_EQ(z.dim(), 192);
  EXPECT_EQ(z.tokens.size(), 64u * 192u);
  const auto r = encode_latent(Image(48, 32), 16);
  EXPECT_EQ(r.n_tokens(), 6);
  EXPECT_EQ(r.dim(), 768);
}

TEST(EncodeLatent, PatchLayoutMatchesDirectIndexing) {
  Rng rng(2);
  const auto img = random_image(rng, 32, 16);
  const auto z = encode_latent<double>(img, 8);
  // token (ty, tx) holds rows ty*8.., cols tx*8.., channel fastest
  for (int ty = 0; ty < 2; ++ty)
    for (int tx = 0; tx < 4; ++tx)
      for (int dy = 0; dy < 8; ++dy)
        for (int dx = 0; dx < 8; ++dx)
          for (int c = 0; c < 3; ++c) {
            const std::size_t t = static_cast<std::size_t>(ty * 4 + tx);
            const std::size_t k = static_cast<std::size_t>((dy * 8 + dx) * 3 + c);
            EXPECT_EQ(z.tokens[t * 192 + k], 2.0 * img.pixel(tx * 8 + dx, ty * 8 + dy)[static_cast<std::size_t>(c)] - 1.0);
          }
}

TEST(EncodeLatent, AffineInImage) {
  // weights summing to one cancel the constant offset of 2x - 1
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_image(rng, 64, 64), b = random_image(rng, 64, 64);
    const double w = rng.uniform();
    Image mix(64, 64);
    for (std::size_t i = 0; i < mix.data.size(); ++i)
      mix.data[i] = static_cast<float>(w * a.data[i] + (1.0 - w) * b.data[i]);
    const auto zm = encode_latent<double>(mix), za = encode_latent<double>(a), zb = encode_latent<double>(b);
    for (std::size_t i = 0; i < zm.tokens.size(); ++i) {
      const double expect = w * za.tokens[i] + (1.0 - w) * zb.tokens[i];
      // mix was stored in float, so compare at float resolution
      ASSERT_NEAR(zm.tokens[i], expect, 2.5e-7);
    }
  }
}

TEST(EncodeLatent, RejectsIndivisibleDims) {
  EXPECT_THROW(encode_latent(Image(60, 64)), ShapeError);
  EXPECT_THROW(encode_latent(Image(64, 64), 0), ShapeError);
}

TEST(DecodeLatent, RoundtripRandomImages) {
  Rng rng(6);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto img = random_image(rng, 64, 64);
    const auto back = decode_latent(encode_latent(img));
    for (std::size_t k = 0; k < img.data.size(); ++k)
      worst = std::max(worst, static_cast<double>(std::fabs(back.data[k] - img.data[k])));
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(DecodeLatent, ZeroTokensGiveMidGray) {
  const LatentGrid<float> z(64, 64, 8);
  const auto img = decode_latent(z);
  for (float v : img.data) EXPECT_EQ(v, 0.5f);
}

TEST(DecodeLatent, ClampsOutOfRange) {
  LatentGrid<float> z(16, 16, 8);
  z.tokens[0] = 3.0f;
  z.tokens[1] = -3.0f;
  const auto img = decode_latent(z);
  EXPECT_EQ(img.data[0], 1.0f);
  EXPECT_EQ(img.data[1], 0.0f);
}

TEST(DecodeLatent, RejectsInconsistentTokenCount) {
  LatentGrid<float> z(16, 16, 8);
  z.tokens.pop_back();
  EXPECT_THROW(decode_latent(z), ShapeError);
  z = LatentGrid<float>(16, 16, 8);
  z.width = 24;
  EXPECT_THROW(decode_latent(z), ShapeError);
}

TEST(LatentCodec, DirectionalDerivativesMatchFiniteDifferences) {
  // both maps are affine, so J v = f(x + v) - f(x) exactly; compare the analytic
  // Jacobians (2 P and P^T / 2) against central differences in double
  Rng rng(8);
  const int h = 16, w = 24, p = 8;
  const std::size_t n = static_cast<std::size_t>(h * w * 3);
  std::vector<double> x(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = rng.uniform();
    v[i] = rng.normal();
  }
  const double eps = 1e-4;
  auto shifted = [&](double s) {
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] + s * v[i];
    return y;
  };
  const auto ep = encode_values(shifted(eps), h, w, p), em = encode_values(shifted(-eps), h, w, p);
  const auto dp = decode_values(shifted(eps), h, w, p), dm = decode_values(shifted(-eps), h, w, p);
  double worst = 0.0;
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx)
      for (int c = 0; c < 3; ++c) {
        const std::size_t pix = static_cast<std::size_t>((y * w + xx) * 3 + c);
        const std::size_t tok = latent_offset(xx, y, c, w, p);
        const double jvp_enc = 2.0 * v[pix];
        const double fd_enc = (ep[tok] - em[tok]) / (2 * eps);
        const double jvp_dec = 0.5 * v[tok];
        const double fd_dec = (dp[pix] - dm[pix]) / (2 * eps);
        worst = std::max(worst, std::fabs(jvp_enc - fd_enc) / std::max(std::fabs(jvp_enc), 1e-12));
        worst = std::max(worst, std::fabs(jvp_dec - fd_dec) / std::max(std::fabs(jvp_dec), 1e-12));
      }
  EXPECT_LE(worst, 1e-6);
}
