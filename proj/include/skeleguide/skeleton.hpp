#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

#include "skeleguide/image.hpp"

namespace skeleguide {

inline constexpr int kNumJoints = 14;
inline constexpr int kNumBones = 13;
/// Hue-rotation budget of the palette; the sampler itself never exceeds 2.
inline constexpr int kMaxPersons = 3;

enum class Joint : int {
  head,
  neck,
  r_shoulder,
  r_elbow,
  r_wrist,
  l_shoulder,
  l_elbow,
  l_wrist,
  r_hip,
  r_knee,
  r_ankle,
  l_hip,
  l_knee,
  l_ankle,
};

inline constexpr std::array<std::string_view, kNumJoints> kJointNames = {
    "head",  "neck",  "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow",
    "l_wrist", "r_hip", "r_knee",   "r_ankle", "l_hip",   "l_knee",     "l_ankle"};

constexpr int idx(Joint j) { return static_cast<int>(j); }

inline std::optional<int> joint_index(std::string_view name) {
  for (int i = 0; i < kNumJoints; ++i)
    if (kJointNames[static_cast<std::size_t>(i)] == name) return i;
  return std::nullopt;
}

struct Bone {
  Joint from;
  Joint to;
};

// Tree rooted at the neck; hips hang directly off the neck (no pelvis joint).
inline constexpr std::array<Bone, kNumBones> kBones = {{
    {Joint::head, Joint::neck},
    {Joint::neck, Joint::r_shoulder},
    {Joint::r_shoulder, Joint::r_elbow},
    {Joint::r_elbow, Joint::r_wrist},
    {Joint::neck, Joint::l_shoulder},
    {Joint::l_shoulder, Joint::l_elbow},
    {Joint::l_elbow, Joint::l_wrist},
    {Joint::neck, Joint::r_hip},
    {Joint::r_hip, Joint::r_knee},
    {Joint::r_knee, Joint::r_ankle},
    {Joint::neck, Joint::l_hip},
    {Joint::l_hip, Joint::l_knee},
    {Joint::l_knee, Joint::l_ankle},
}};

inline std::string bone_name(const Bone& b) {
  return std::string(kJointNames[static_cast<std::size_t>(idx(b.from))]) + "–" +
         std::string(kJointNames[static_cast<std::size_t>(idx(b.to))]);
}

/// Per-bone length range in pixels for a 64-pixel-high canvas; scale linearly with height.
struct LengthRange {
  double min;
  double max;
};

inline constexpr std::array<LengthRange, kNumBones> kBoneRanges64 = {{
    {5.0, 6.5},    // head-neck
    {5.0, 6.5},    // neck-r_shoulder
    {6.0, 8.0},    // upper arm
    {6.0, 8.0},    // forearm
    {5.0, 6.5},    // neck-l_shoulder
    {6.0, 8.0},
    {6.0, 8.0},
    {10.5, 14.0},  // neck-r_hip
    {7.5, 10.0},   // thigh
    {7.5, 10.0},   // shin
    {10.5, 14.0},  // neck-l_hip
    {7.5, 10.0},
    {7.5, 10.0},
}};

inline LengthRange bone_range(int bone, int canvas_height) {
  const double s = canvas_height / 64.0;
  const auto r = kBoneRanges64[static_cast<std::size_t>(bone)];
  return {r.min * s, r.max * s};
}

// ---------------------------------------------------------------------------
// Palette. Every channel is one of {0, 85, 170, 255} and each color has at
// least one channel >= 170; a cyclic channel shift (r,g,b) -> (b,r,g) is an
// exact 120 degree hue rotation, giving three disjoint person palettes.
// Grid colors are pairwise >= 85/255 apart in max-channel distance.

inline constexpr std::array<std::array<int, 3>, kNumJoints> kJointPalette8 = {{
    {255, 0, 0},     // head
    {255, 0, 85},    // neck
    {255, 0, 170},   // r_shoulder
    {255, 85, 0},    // r_elbow
    {255, 170, 0},   // r_wrist
    {255, 255, 0},   // l_shoulder
    {170, 0, 0},     // l_elbow
    {170, 0, 85},    // l_wrist
    {170, 85, 0},    // r_hip
    {170, 170, 0},   // r_knee
    {255, 85, 85},   // r_ankle
    {255, 85, 170},  // l_hip
    {255, 170, 85},  // l_knee
    {255, 255, 85},  // l_ankle
}};

inline constexpr std::array<int, 3> kBonePalette8 = {255, 255, 170};

/// Hue rotation by k * 120 degrees.
constexpr std::array<int, 3> rotate_hue(std::array<int, 3> c, int k) {
  for (int i = 0; i < ((k % 3) + 3) % 3; ++i) c = {c[2], c[0], c[1]};
  return c;
}

inline Rgb to_rgb(const std::array<int, 3>& c) { return rgb8(c[0], c[1], c[2]); }

inline Rgb joint_color(int person, int joint) {
  return to_rgb(rotate_hue(kJointPalette8[static_cast<std::size_t>(joint)], person));
}

inline Rgb bone_color(int person) { return to_rgb(rotate_hue(kBonePalette8, person)); }

/// Max-channel (Chebyshev) distance between two colors.
inline float color_distance(const Rgb& a, const Rgb& b) {
  return std::max({std::fabs(a[0] - b[0]), std::fabs(a[1] - b[1]), std::fabs(a[2] - b[2])});
}

// ---------------------------------------------------------------------------
// Rasterization. Pixel (x, y) has its center at integer coordinates (x, y).

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(const Point& a, const Point& b) { return std::hypot(a.x - b.x, a.y - b.y); }

inline int round_px(double v) { return static_cast<int>(std::floor(v + 0.5)); }

/// Filled disc centred on the pixel nearest to `c`.
inline void fill_disc(Image& img, const Point& c, int radius, const Rgb& color, Mask* mask = nullptr) {
  const int cx = round_px(c.x), cy = round_px(c.y);
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx * dx + dy * dy > radius * radius) continue;
      const int x = cx + dx, y = cy + dy;
      if (!img.contains(x, y)) continue;
      img.set(x, y, color);
      if (mask) mask->mark(x, y);
    }
}

inline double segment_distance(double px, double py, const Point& a, const Point& b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((px - a.x) * vx + (py - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (a.x + t * vx), py - (a.y + t * vy));
}

/// Marks every pixel whose center lies within `radius` of segment ab.
template <class Fn>
void for_capsule(int width, int height, const Point& a, const Point& b, double radius, Fn&& fn) {
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - radius)));
  const int x1 = std::min(width - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + radius)));
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - radius)));
  const int y1 = std::min(height - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + radius)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (segment_distance(x, y, a, b) <= radius) fn(x, y);
}

inline void fill_capsule(Image& img, const Point& a, const Point& b, double radius, const Rgb& color,
                         Mask* mask = nullptr) {
  for_capsule(img.width, img.height, a, b, radius, [&](int x, int y) {
    img.set(x, y, color);
    if (mask) mask->mark(x, y);
  });
}

}  // namespace skeleguide
