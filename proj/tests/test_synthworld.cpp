#include <gtest/gtest.h>

#include <set>

#include "skeleguide/synthworld.hpp"

using namespace skeleguide;

namespace {

std::vector<Rgb> skeleton_palette() {
  std::vector<Rgb> out;
  for (int p = 0; p < kMaxPersons; ++p) {
    for (int j = 0; j < kNumJoints; ++j) out.push_back(joint_color(p, j));
    out.push_back(bone_color(p));
  }
  return out;
}

}  // namespace

TEST(SampleScene, DeterministicForSeed) {
  const auto a = sample_scene(0);
  const auto b = sample_scene(0);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.spec, b.spec);
  EXPECT_NE(sample_scene(1).image, a.image);
}

TEST(SampleScene, RejectsSizeNotMultipleOfPatch) {
  WorldConfig cfg;
  cfg.width = 60;
  EXPECT_THROW(sample_scene(0, cfg), ConfigError);
}

TEST(SampleScene, BackgroundFarFromSkeletonPalette) {
  const auto palette = skeleton_palette();
  float worst = 1.0f;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto scene = sample_scene(seed);
    for (int y = 0; y < scene.image.height; ++y)
      for (int x = 0; x < scene.image.width; ++x)
        for (const auto& c : palette) worst = std::min(worst, color_distance(scene.image.pixel(x, y), c));
  }
  EXPECT_GE(worst, 64.0f / 255.0f);
}

TEST(SampleScene, PaletteColorsMutuallySeparated) {
  const auto palette = skeleton_palette();
  for (std::size_t i = 0; i < palette.size(); ++i)
    for (std::size_t k = i + 1; k < palette.size(); ++k)
      EXPECT_GE(color_distance(palette[i], palette[k]), 64.0f / 255.0f) << i << " vs " << k;
}

TEST(SampleScene, BenchRestsOnFloorAcrossSeeds) {
  int with_bench = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto scene = sample_scene(seed);
    const auto& spec = scene.spec;
    EXPECT_GE(spec.floor_y, 0.65 * spec.height);
    EXPECT_LE(spec.floor_y, 0.9 * spec.height);
    // bench pixels present iff the spec declares one
    bool bench_pixels = false;
    for (int x = 0; x < spec.width; ++x) {
      const int y = spec.floor_y - 1;
      if (scene.image.pixel(x, y) == spec.style.bench)
        bench_pixels = true;
    }
    if (spec.bench) {
      ++with_bench;
      EXPECT_EQ(spec.bench->y1, spec.floor_y);
      EXPECT_LT(spec.bench->y0, spec.bench->y1);
      EXPECT_GE(spec.bench->x0, 0);
      EXPECT_LE(spec.bench->x1, spec.width);
      EXPECT_TRUE(bench_pixels) << seed;
    }
  }
  EXPECT_GT(with_bench, 300);
  EXPECT_LT(with_bench, 700);
}

TEST(SamplePoses, StandingLeftSinglePerson) {
  const auto prompt = make_prompt(Action::standing, Location::left, 1);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto scene = sample_scene(seed).spec;
    const auto poses = sample_poses(scene, prompt, seed);
    ASSERT_EQ(poses.size(), 1u);
    const auto& p = poses[0];
    EXPECT_LT(p.pelvis().x, scene.width / 3.0);
    EXPECT_NEAR(p[Joint::r_ankle].y, scene.floor_y, 2.0);
    EXPECT_NEAR(p[Joint::l_ankle].y, scene.floor_y, 2.0);
    EXPECT_TRUE(bones_in_range(p, scene.height));
    EXPECT_TRUE(joints_in_bounds(p, scene.width, scene.height, 0.0));
  }
}

TEST(SamplePoses, SittingCenterOnBench) {
  const auto prompt = make_prompt(Action::sitting, Location::center, 1);
  int checked = 0;
  for (std::uint64_t seed = 0; checked < 1000 && seed < 20000; ++seed) {
    auto scene = sample_scene(seed).spec;
    if (!scene.bench) continue;
    const double cx = 0.5 * (scene.bench->x0 + scene.bench->x1);
    if (cx < scene.width / 3.0 || cx > 2.0 * scene.width / 3.0) continue;
    std::vector<Pose> poses;
    try {
      poses = sample_poses(scene, prompt, seed);
    } catch (const InconsistencyError&) {
      continue;  // bench overlaps the centre band too little
    }
    ++checked;
    ASSERT_EQ(poses.size(), 1u);
    EXPECT_NEAR(poses[0].pelvis().y, scene.bench->y0, 2.0);
    EXPECT_TRUE(bones_in_range(poses[0], scene.height));
  }
  EXPECT_EQ(checked, 1000);
}

TEST(SamplePoses, PairsAreSeparatedAndIndexed) {
  const auto prompt = make_prompt(Action::standing, Location::center, 2);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto scene = sample_scene(seed).spec;
    const auto poses = sample_poses(scene, prompt, seed);
    ASSERT_EQ(poses.size(), 2u);
    EXPECT_EQ(poses[0].person_index, 0);
    EXPECT_EQ(poses[1].person_index, 1);
    EXPECT_GE(std::fabs(poses[0].pelvis().x - poses[1].pelvis().x), 8.0);
    EXPECT_TRUE(joints_separated(poses));
  }
}

TEST(SamplePoses, SittingWithoutBenchIsInconsistent) {
  SceneSpec scene = sample_scene(0).spec;
  scene.bench.reset();
  EXPECT_THROW(sample_poses(scene, make_prompt(Action::sitting, Location::center, 1), 0), InconsistencyError);
}

TEST(SamplePoses, Deterministic) {
  const auto scene = sample_scene(5).spec;
  const auto prompt = make_prompt(Action::standing, Location::right, 1);
  EXPECT_EQ(sample_poses(scene, prompt, 9), sample_poses(scene, prompt, 9));
}

TEST(RenderLayout, EmptyPosesIsIdentity) {
  const auto scene = sample_scene(3).image;
  EXPECT_EQ(render_layout(scene, {}), scene);
}

TEST(RenderLayout, PixelsOutsideFootprintUntouched) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = make_sample(seed, seed);
    const Mask fp = layout_footprint(s.scene.width, s.scene.height, s.poses);
    for (int y = 0; y < s.scene.height; ++y)
      for (int x = 0; x < s.scene.width; ++x)
        if (!fp.at(x, y)) {
          ASSERT_EQ(s.layout.pixel(x, y), s.scene.pixel(x, y));
        }
  }
}

TEST(RenderLayout, FourteenJointBlobsForOnePerson) {
  const auto scene = sample_scene(11);
  const auto poses = sample_poses(scene.spec, make_prompt(Action::standing, Location::center, 1), 11);
  const auto layout = render_layout(scene.image, poses);
  std::set<int> seen;
  std::array<int, kNumJoints> counts{};
  for (int y = 0; y < layout.height; ++y)
    for (int x = 0; x < layout.width; ++x)
      for (int j = 0; j < kNumJoints; ++j)
        if (layout.pixel(x, y) == joint_color(0, j)) {
          seen.insert(j);
          ++counts[static_cast<std::size_t>(j)];
        }
  EXPECT_EQ(seen.size(), static_cast<std::size_t>(kNumJoints));
  for (int c : counts) EXPECT_EQ(c, 13);  // full radius-2 disc
}

TEST(RenderLayout, RejectsMoreThanThreePersons) {
  const auto scene = sample_scene(0).image;
  std::vector<Pose> poses(4);
  EXPECT_THROW(render_layout(scene, poses), UnsupportedError);
}

TEST(RenderHuman, EmptyPosesLeavesSceneAndEmptyMask) {
  const auto scene = sample_scene(2).image;
  const auto h = render_human(scene, {}, 7);
  EXPECT_EQ(h.image, scene);
  EXPECT_EQ(h.mask.count(), 0u);
}

TEST(RenderHuman, SceneUntouchedOutsideMaskAndAreaBounded) {
  const auto prompt = make_prompt(Action::standing, Location::center, 1);
  double lo = 1.0, hi = 0.0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto scene = sample_scene(seed);
    const auto poses = sample_poses(scene.spec, prompt, seed);
    const auto h = render_human(scene.image, poses, seed);
    for (int y = 0; y < scene.image.height; ++y)
      for (int x = 0; x < scene.image.width; ++x)
        if (!h.mask.at(x, y)) {
          ASSERT_EQ(h.image.pixel(x, y), scene.image.pixel(x, y));
        }
    const double frac = static_cast<double>(h.mask.count()) / static_cast<double>(scene.image.pixel_count());
    lo = std::min(lo, frac);
    hi = std::max(hi, frac);
  }
  EXPECT_GE(lo, 0.01);
  EXPECT_LE(hi, 0.20);
}

TEST(MakeSample, SatisfiesSampleInvariants) {
  for (std::uint64_t i = 0; i < 300; ++i) {
    const auto s = make_sample(i, sample_seed(42, i));
    EXPECT_EQ(s.layout, render_layout(s.scene, s.poses));
    EXPECT_EQ(static_cast<int>(s.poses.size()), s.prompt.count);
    for (const auto& p : s.poses) EXPECT_TRUE(pose_matches_scene(p, s.scene_spec, s.prompt.action));
    if (s.prompt.action == Action::sitting) {
          EXPECT_TRUE(s.scene_spec.bench.has_value());
        }
    EXPECT_EQ(s.prompt, make_prompt(s.prompt.action, s.prompt.location, s.prompt.count));
  }
}
