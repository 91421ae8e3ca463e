#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "skeleguide/errors.hpp"
#include "skeleguide/image.hpp"
#include "skeleguide/rng.hpp"
#include "skeleguide/skeleton.hpp"

namespace skeleguide {

struct WorldConfig {
  int width = 64;
  int height = 64;
  int patch_size = 8;
  double bench_probability = 0.5;
  double sitting_probability = 0.5;
  double pair_probability = 0.25;

  void validate() const {
    if (width <= 0 || height <= 0 || patch_size <= 0) throw ConfigError("image size and patch size must be positive");
    if (width % patch_size != 0 || height % patch_size != 0)
      throw ConfigError("image size " + std::to_string(width) + "x" + std::to_string(height) +
                        " is not a multiple of patch size " + std::to_string(patch_size));
    if (height < 32 || width < 32) throw ConfigError("canvas must be at least 32x32");
  }
};

/// Axis-aligned rectangle with exclusive upper bounds.
struct Rect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  friend bool operator==(const Rect&, const Rect&) = default;
};

struct BackgroundStyle {
  Rgb wall_top{};
  Rgb wall_bottom{};
  Rgb floor{};
  Rgb bench{};
  friend bool operator==(const BackgroundStyle&, const BackgroundStyle&) = default;
};

struct SceneSpec {
  int width = 64;
  int height = 64;
  int floor_y = 48;
  std::optional<Rect> bench;
  BackgroundStyle style;
  std::uint64_t seed = 0;
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct Scene {
  SceneSpec spec;
  Image image;
};

// Background channels stay inside [20, 100]/255 while every skeleton palette
// color has a channel >= 170/255, so the max-channel gap is >= 70/255.
inline constexpr int kBackgroundMin8 = 20;
inline constexpr int kBackgroundMax8 = 100;

inline Scene sample_scene(std::uint64_t seed, const WorldConfig& config = {}) {
  config.validate();
  Rng rng(Rng::derive(seed, 0x5CE4E));
  SceneSpec spec;
  spec.width = config.width;
  spec.height = config.height;
  spec.seed = seed;
  const int floor_lo = static_cast<int>(std::ceil(0.65 * config.height));
  const int floor_hi = static_cast<int>(std::floor(0.9 * config.height));
  spec.floor_y = static_cast<int>(rng.uniform_int(floor_lo, floor_hi));

  auto low_sat = [&](int base_lo, int base_hi) {
    const int base = static_cast<int>(rng.uniform_int(base_lo, base_hi));
    std::array<int, 3> c{};
    for (auto& ch : c) ch = std::clamp(base + static_cast<int>(rng.uniform_int(-8, 8)), kBackgroundMin8, kBackgroundMax8);
    return rgb8(c[0], c[1], c[2]);
  };
  spec.style.wall_top = low_sat(40, 92);
  spec.style.wall_bottom = low_sat(28, 80);
  spec.style.floor = low_sat(28, 70);
  spec.style.bench = low_sat(60, 92);

  const double s = config.height / 64.0;
  if (rng.bernoulli(config.bench_probability)) {
    const int bw = static_cast<int>(std::lround(rng.uniform(18.0, 40.0) * s * config.width / config.height));
    const int bh = static_cast<int>(std::lround(rng.uniform(10.0, 14.0) * s));
    const int margin = static_cast<int>(std::lround(4 * s));
    Rect b;
    b.x0 = static_cast<int>(rng.uniform_int(margin, std::max(margin, config.width - margin - bw)));
    b.x1 = b.x0 + bw;
    b.y1 = spec.floor_y;
    b.y0 = spec.floor_y - bh;
    spec.bench = b;
  }

  Image img(config.width, config.height);
  for (int y = 0; y < config.height; ++y) {
    Rgb row{};
    if (y < spec.floor_y) {
      const float a = spec.floor_y > 1 ? static_cast<float>(y) / static_cast<float>(spec.floor_y - 1) : 0.0f;
      for (int c = 0; c < 3; ++c) row[c] = (1.0f - a) * spec.style.wall_top[c] + a * spec.style.wall_bottom[c];
    } else {
      row = spec.style.floor;
    }
    for (int x = 0; x < config.width; ++x) img.set(x, y, row);
  }
  if (spec.bench) {
    for (int y = spec.bench->y0; y < spec.bench->y1; ++y)
      for (int x = spec.bench->x0; x < spec.bench->x1; ++x) img.set(x, y, spec.style.bench);
  }
  quantize(img);
  return {spec, std::move(img)};
}

// ---------------------------------------------------------------------------
// Prompts

enum class Action { standing, sitting };
enum class Location { left, center, right };

/// Text vocabulary. Slot 0 of a prompt is the <place> marker; the curriculum
/// swaps it for a task token (<layout>, <human>, <scene>) when conditioning.
namespace vocab {
inline constexpr int pad = 0;
inline constexpr int place = 1;
inline constexpr int standing = 2;
inline constexpr int sitting = 3;
inline constexpr int left = 4;
inline constexpr int center = 5;
inline constexpr int right = 6;
inline constexpr int one = 7;
inline constexpr int two = 8;
inline constexpr int task_layout = 9;
inline constexpr int task_human = 10;
inline constexpr int task_scene = 11;
inline constexpr int size = 12;
}  // namespace vocab

inline constexpr int kPromptLength = 4;

struct PromptSpec {
  Action action = Action::standing;
  Location location = Location::center;
  int count = 1;
  std::array<int, kPromptLength> token_ids{};
  friend bool operator==(const PromptSpec&, const PromptSpec&) = default;
};

inline PromptSpec make_prompt(Action action, Location location, int count) {
  if (count < 1 || count > 2) throw ConfigError("prompt count must be 1 or 2");
  PromptSpec p{action, location, count, {}};
  p.token_ids = {vocab::place, action == Action::standing ? vocab::standing : vocab::sitting,
                 location == Location::left     ? vocab::left
                 : location == Location::center ? vocab::center
                                                : vocab::right,
                 count == 1 ? vocab::one : vocab::two};
  return p;
}

inline std::string_view to_string(Action a) { return a == Action::standing ? "standing" : "sitting"; }
inline std::string_view to_string(Location l) {
  return l == Location::left ? "left" : l == Location::center ? "center" : "right";
}
inline std::optional<Action> parse_action(std::string_view s) {
  if (s == "standing") return Action::standing;
  if (s == "sitting") return Action::sitting;
  return std::nullopt;
}
inline std::optional<Location> parse_location(std::string_view s) {
  if (s == "left") return Location::left;
  if (s == "center") return Location::center;
  if (s == "right") return Location::right;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Poses

struct Pose {
  std::array<Point, kNumJoints> joints{};
  int person_index = 0;

  const Point& operator[](Joint j) const { return joints[static_cast<std::size_t>(idx(j))]; }
  Point& operator[](Joint j) { return joints[static_cast<std::size_t>(idx(j))]; }
  Point pelvis() const {
    const auto& r = (*this)[Joint::r_hip];
    const auto& l = (*this)[Joint::l_hip];
    return {(r.x + l.x) / 2.0, (r.y + l.y) / 2.0};
  }
  friend bool operator==(const Pose&, const Pose&) = default;
};

/// Minimum distance between rounded joint centres; keeps radius-2 discs disjoint.
inline constexpr int kMinJointSeparation = 5;
/// Joints stay this far from the border so their discs are never clipped.
inline constexpr int kJointMargin = 2;

/// Bone lengths within [min * (1 - tolerance), max * (1 + tolerance)].
inline bool bones_in_range(const Pose& p, int canvas_height, double tolerance = 0.0) {
  for (int b = 0; b < kNumBones; ++b) {
    const auto& bone = kBones[static_cast<std::size_t>(b)];
    const double len = distance(p[bone.from], p[bone.to]);
    const auto r = bone_range(b, canvas_height);
    if (len < r.min * (1.0 - tolerance) || len > r.max * (1.0 + tolerance)) return false;
  }
  return true;
}

inline bool joints_separated(const std::vector<Pose>& poses) {
  std::vector<std::pair<int, int>> centres;
  for (const auto& p : poses)
    for (const auto& j : p.joints) centres.emplace_back(round_px(j.x), round_px(j.y));
  for (std::size_t i = 0; i < centres.size(); ++i)
    for (std::size_t k = i + 1; k < centres.size(); ++k) {
      const int dx = centres[i].first - centres[k].first;
      const int dy = centres[i].second - centres[k].second;
      if (dx * dx + dy * dy < kMinJointSeparation * kMinJointSeparation) return false;
    }
  return true;
}

inline bool joints_in_bounds(const Pose& p, int width, int height, double margin = kJointMargin) {
  for (const auto& j : p.joints)
    if (!(j.x >= margin && j.y >= margin && j.x <= width - 1 - margin && j.y <= height - 1 - margin)) return false;
  return true;
}

/// Scene coupling: standing ankles on the floor line, sitting hips on the bench top.
inline bool pose_matches_scene(const Pose& p, const SceneSpec& scene, Action action) {
  if (action == Action::standing)
    return std::fabs(p[Joint::r_ankle].y - scene.floor_y) <= 2.0 && std::fabs(p[Joint::l_ankle].y - scene.floor_y) <= 2.0;
  if (!scene.bench) return false;
  return std::fabs(p.pelvis().y - scene.bench->y0) <= 2.0;
}

namespace detail {

inline double deg(double d) { return d * M_PI / 180.0; }

inline Point add(const Point& p, double len, double angle_from_down, double side) {
  return {p.x + side * len * std::sin(angle_from_down), p.y + len * std::cos(angle_from_down)};
}

/// Builds one figure around `pelvis`; legs depend on the action. Standing
/// figures are returned with ankles at an arbitrary height; the caller drops
/// them onto the floor.
inline Pose build_figure(Rng& rng, Point pelvis, Action action, double s) {
  Pose p;
  const double hw = rng.uniform(2.6, 3.4) * s;
  const double torso = rng.uniform(11.0, 13.2) * s;
  const double lean = deg(rng.uniform(-8.0, 8.0));
  p[Joint::r_hip] = {pelvis.x - hw, pelvis.y};
  p[Joint::l_hip] = {pelvis.x + hw, pelvis.y};
  p[Joint::neck] = {pelvis.x + torso * std::sin(lean), pelvis.y - torso * std::cos(lean)};
  const double head_len = rng.uniform(5.2, 6.3) * s;
  const double nod = lean + deg(rng.uniform(-10.0, 10.0));
  p[Joint::head] = {p[Joint::neck].x + head_len * std::sin(nod), p[Joint::neck].y - head_len * std::cos(nod)};

  const double arm_lo = action == Action::standing ? 5.0 : 10.0;
  const double arm_hi = action == Action::standing ? 35.0 : 40.0;
  struct Side {
    Joint shoulder, elbow, wrist, hip, knee, ankle;
    double sign;
  };
  const std::array<Side, 2> sides = {{
      {Joint::r_shoulder, Joint::r_elbow, Joint::r_wrist, Joint::r_hip, Joint::r_knee, Joint::r_ankle, -1.0},
      {Joint::l_shoulder, Joint::l_elbow, Joint::l_wrist, Joint::l_hip, Joint::l_knee, Joint::l_ankle, 1.0},
  }};
  for (const auto& side : sides) {
    const double sl = rng.uniform(5.2, 6.3) * s;
    const double droop = deg(rng.uniform(10.0, 30.0));
    const Point& neck = p[Joint::neck];
    p[side.shoulder] = {neck.x + side.sign * sl * std::cos(droop), neck.y + sl * std::sin(droop)};
    const double upper = deg(rng.uniform(arm_lo, arm_hi));
    const double fore = upper + deg(rng.uniform(-15.0, 30.0));
    p[side.elbow] = add(p[side.shoulder], rng.uniform(6.2, 7.8) * s, upper, side.sign);
    p[side.wrist] = add(p[side.elbow], rng.uniform(6.2, 7.8) * s, fore, side.sign);

    const double thigh = rng.uniform(7.8, 9.7) * s;
    const double shin = rng.uniform(7.8, 9.7) * s;
    if (action == Action::standing) {
      const double a_thigh = deg(rng.uniform(0.0, 12.0));
      const double a_shin = a_thigh + deg(rng.uniform(-10.0, 4.0));
      p[side.knee] = add(p[side.hip], thigh, a_thigh, side.sign);
      p[side.ankle] = add(p[side.knee], shin, a_shin, side.sign);
    } else {
      // knees spread outward and down, shins roughly vertical
      const double below = deg(rng.uniform(25.0, 50.0));
      p[side.knee] = {p[side.hip].x + side.sign * thigh * std::cos(below), p[side.hip].y + thigh * std::sin(below)};
      p[side.ankle] = add(p[side.knee], shin, deg(rng.uniform(-10.0, 10.0)), side.sign);
    }
  }
  return p;
}

inline std::pair<double, double> location_band(Location loc, int width) {
  const double w = width;
  switch (loc) {
    case Location::left: return {0.12 * w, w / 3.0};
    case Location::center: return {w / 3.0, 2.0 * w / 3.0};
    case Location::right: return {2.0 * w / 3.0, 0.88 * w};
  }
  return {0.0, w};
}

}  // namespace detail

/// Scene-consistent poses for `prompt`. Persons are returned left to right,
/// person_index 0 being the leftmost.
///
/// Location applies to the pelvis x of a single person, and to the group's
/// mean pelvis x for pairs. Throws InconsistencyError when the prompt cannot
/// be realised in the scene.
inline std::vector<Pose> sample_poses(const SceneSpec& scene, const PromptSpec& prompt, std::uint64_t seed) {
  if (prompt.count < 1 || prompt.count > 2) throw ConfigError("prompt count must be 1 or 2");
  if (prompt.action == Action::sitting && !scene.bench)
    throw InconsistencyError("sitting prompt requires a bench in the scene");
  Rng rng(Rng::derive(seed, 0x9053));
  const double s = scene.height / 64.0;
  auto [lo, hi] = detail::location_band(prompt.location, scene.width);
  double seat_lo = 0.0, seat_hi = scene.width;
  if (prompt.action == Action::sitting) {
    seat_lo = scene.bench->x0 + 3.0 * s;
    seat_hi = scene.bench->x1 - 1 - 3.0 * s;
  }
  constexpr int kAttempts = 4000;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    std::vector<double> xs;
    if (prompt.count == 1) {
      const double a = std::max(lo, seat_lo), b = std::min(hi, seat_hi);
      if (a >= b) break;
      xs.push_back(rng.uniform(a, b));
    } else {
      const double sep = rng.uniform(17.0, 26.0) * s;
      const double c = rng.uniform(lo, hi);
      xs = {c - sep / 2.0, c + sep / 2.0};
      if (xs[0] < seat_lo || xs[1] > seat_hi) continue;
    }
    std::vector<Pose> poses;
    bool ok = true;
    for (std::size_t i = 0; i < xs.size() && ok; ++i) {
      const double py = prompt.action == Action::sitting ? scene.bench->y0 : 0.0;
      Pose p = detail::build_figure(rng, {xs[i], py}, prompt.action, s);
      if (prompt.action == Action::standing) {
        const double lowest = std::max(p[Joint::r_ankle].y, p[Joint::l_ankle].y);
        const double dy = scene.floor_y - lowest;
        for (auto& j : p.joints) j.y += dy;
      }
      p.person_index = static_cast<int>(i);
      ok = bones_in_range(p, scene.height) && joints_in_bounds(p, scene.width, scene.height) &&
           pose_matches_scene(p, scene, prompt.action);
      poses.push_back(p);
    }
    if (ok && joints_separated(poses)) return poses;
  }
  throw InconsistencyError("cannot place " + std::to_string(prompt.count) + " " + std::string(to_string(prompt.action)) +
                           " person(s) at " + std::string(to_string(prompt.location)) + " in scene " +
                           std::to_string(scene.seed));
}

/// Draws a prompt the scene can host; falls back to a single standing person
/// in the centre when the drawn combination cannot be placed.
inline std::pair<PromptSpec, std::vector<Pose>> sample_prompt_and_poses(const SceneSpec& scene, std::uint64_t seed,
                                                                        const WorldConfig& config = {}) {
  Rng rng(Rng::derive(seed, 0x960));
  const bool sit = scene.bench && rng.bernoulli(config.sitting_probability);
  const int count = rng.bernoulli(config.pair_probability) ? 2 : 1;
  Location loc = static_cast<Location>(rng.uniform_int(0, 2));
  if (sit) {
    const double cx = 0.5 * (scene.bench->x0 + scene.bench->x1);
    loc = cx < scene.width / 3.0 ? Location::left : cx < 2.0 * scene.width / 3.0 ? Location::center : Location::right;
  } else if (count == 2) {
    loc = Location::center;
  }
  std::vector<PromptSpec> candidates = {make_prompt(sit ? Action::sitting : Action::standing, loc, count)};
  if (count == 2) candidates.push_back(make_prompt(sit ? Action::sitting : Action::standing, loc, 1));
  candidates.push_back(make_prompt(Action::standing, loc, 1));
  candidates.push_back(make_prompt(Action::standing, Location::center, 1));
  for (const auto& prompt : candidates) {
    try {
      return {prompt, sample_poses(scene, prompt, seed)};
    } catch (const InconsistencyError&) {
    }
  }
  throw InconsistencyError("scene " + std::to_string(scene.seed) + " cannot host any prompt");
}

// ---------------------------------------------------------------------------
// Rendering

inline constexpr int kJointDiscRadius = 2;
inline constexpr double kBoneStrokeRadius = 1.0;
inline constexpr double kLimbRadius = 3.0;
inline constexpr int kHeadRadius = 4;

/// Overlays skeleton strokes: all bones of all persons first, then joint discs
/// on top, so discs are never occluded by strokes.
inline Image render_layout(const Image& scene, const std::vector<Pose>& poses, Mask* footprint = nullptr) {
  if (poses.size() > static_cast<std::size_t>(kMaxPersons))
    throw UnsupportedError("at most " + std::to_string(kMaxPersons) + " persons can be overlaid (palette exhausted)");
  for (const auto& p : poses)
    if (p.person_index < 0 || p.person_index >= kMaxPersons)
      throw UnsupportedError("person_index " + std::to_string(p.person_index) + " outside the palette");
  Image out = scene;
  for (const auto& p : poses)
    for (const auto& bone : kBones)
      fill_capsule(out, p[bone.from], p[bone.to], kBoneStrokeRadius, bone_color(p.person_index), footprint);
  for (const auto& p : poses)
    for (int j = 0; j < kNumJoints; ++j)
      fill_disc(out, p.joints[static_cast<std::size_t>(j)], kJointDiscRadius, joint_color(p.person_index, j), footprint);
  return out;
}

inline Mask layout_footprint(int width, int height, const std::vector<Pose>& poses) {
  Mask m(width, height);
  Image scratch(width, height);
  render_layout(scratch, poses, &m);
  return m;
}

inline Rgb clothing_color(std::uint64_t seed, int person) {
  Rng rng(Rng::derive(seed, 0xC10 + static_cast<std::uint64_t>(person)));
  // saturated mid-tones, distinct from the dim background range
  std::array<int, 3> c{};
  for (auto& ch : c) ch = static_cast<int>(rng.uniform_int(30, 230));
  c[static_cast<std::size_t>(rng.uniform_int(0, 2))] = static_cast<int>(rng.uniform_int(180, 250));
  return rgb8(c[0], c[1], c[2]);
}

inline constexpr Rgb kSkinColor = rgb8(224, 172, 138);

/// Stick person with capsule limbs and a head disc. Mask marks every drawn pixel.
inline Mask silhouette(int width, int height, const std::vector<Pose>& poses) {
  Mask m(width, height);
  for (const auto& p : poses) {
    for (const auto& bone : kBones)
      for_capsule(width, height, p[bone.from], p[bone.to], kLimbRadius, [&](int x, int y) { m.mark(x, y); });
    Image scratch(width, height);
    fill_disc(scratch, p[Joint::head], kHeadRadius, {}, &m);
  }
  return m;
}

struct HumanRender {
  Image image;
  Mask mask;
};

inline HumanRender render_human(const Image& scene, const std::vector<Pose>& poses, std::uint64_t seed) {
  if (poses.size() > static_cast<std::size_t>(kMaxPersons))
    throw UnsupportedError("at most " + std::to_string(kMaxPersons) + " persons can be rendered");
  HumanRender out{scene, Mask(scene.width, scene.height)};
  for (const auto& p : poses) {
    const Rgb cloth = clothing_color(seed, p.person_index);
    for (const auto& bone : kBones) fill_capsule(out.image, p[bone.from], p[bone.to], kLimbRadius, cloth, &out.mask);
    fill_disc(out.image, p[Joint::head], kHeadRadius, kSkinColor, &out.mask);
  }
  quantize(out.image);
  return out;
}

// ---------------------------------------------------------------------------
// Samples

struct Sample {
  SceneSpec scene_spec;
  Image scene;
  Image layout;
  Image human;
  Mask human_mask;
  std::vector<Pose> poses;
  PromptSpec prompt;
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
};

inline Sample make_sample(std::uint64_t id, std::uint64_t seed, const WorldConfig& config = {}) {
  Scene scene = sample_scene(Rng::derive(seed, 1), config);
  auto [prompt, poses] = sample_prompt_and_poses(scene.spec, Rng::derive(seed, 2), config);
  Sample s;
  s.scene_spec = scene.spec;
  s.layout = render_layout(scene.image, poses);
  auto human = render_human(scene.image, poses, Rng::derive(seed, 3));
  s.human = std::move(human.image);
  s.human_mask = std::move(human.mask);
  s.scene = std::move(scene.image);
  s.poses = std::move(poses);
  s.prompt = prompt;
  s.id = id;
  s.seed = seed;
  return s;
}

/// Sample `i` of a world seeded by `seed`; independent of every other index.
inline std::uint64_t sample_seed(std::uint64_t world_seed, std::uint64_t i) { return Rng::derive(world_seed, 0x5A3D0000ULL + i); }

inline std::vector<Sample> make_world(std::size_t count, std::uint64_t seed, const WorldConfig& config = {}) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_sample(i, sample_seed(seed, i), config));
  return out;
}

}  // namespace skeleguide
