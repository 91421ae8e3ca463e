#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "skeleguide/dataset.hpp"

using namespace skeleguide;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("skeleguide_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Dataset, EmptyManifest) {
  const auto dir = temp_dir("empty");
  const auto m = build_dataset(0, 1, dir);
  EXPECT_TRUE(fs::exists(m));
  EXPECT_EQ(fs::file_size(m), 0u);
  EXPECT_TRUE(load_dataset(dir).samples.empty());
  fs::remove_all(dir);
}

TEST(Dataset, DeterministicManifest) {
  const auto a = temp_dir("det_a"), b = temp_dir("det_b");
  build_dataset(25, 7, a);
  build_dataset(25, 7, b);
  EXPECT_EQ(slurp(a / kManifestName), slurp(b / kManifestName));
  EXPECT_EQ(slurp(a / "layout/000013.png"), slurp(b / "layout/000013.png"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, ReloadedSamplesSatisfyInvariants) {
  const auto dir = temp_dir("reload");
  build_dataset(200, 3, dir);
  const auto ds = load_dataset(dir);
  ASSERT_EQ(ds.samples.size(), 200u);
  for (const auto& s : ds.samples) {
    const Sample fresh = make_sample(s.id, sample_seed(3, s.id));
    ASSERT_EQ(s.scene, fresh.scene) << s.id;
    ASSERT_EQ(s.layout, fresh.layout) << s.id;
    ASSERT_EQ(s.human, fresh.human) << s.id;
    ASSERT_EQ(s.human_mask.bits, fresh.human_mask.bits) << s.id;
    ASSERT_EQ(s.prompt, fresh.prompt) << s.id;
    ASSERT_EQ(s.scene_spec.floor_y, fresh.scene_spec.floor_y);
    ASSERT_EQ(s.scene_spec.bench, fresh.scene_spec.bench);
    ASSERT_EQ(s.poses.size(), fresh.poses.size());
    for (std::size_t p = 0; p < s.poses.size(); ++p)
      for (int k = 0; k < kNumJoints; ++k)
        ASSERT_LE(distance(s.poses[p].joints[static_cast<std::size_t>(k)], fresh.poses[p].joints[static_cast<std::size_t>(k)]), 1e-6);
    // invariants of the world, checked on the reloaded copy
    for (const auto& p : s.poses) {
      EXPECT_TRUE(pose_matches_scene(p, s.scene_spec, s.prompt.action));
      EXPECT_TRUE(bones_in_range(p, s.scene.height, 1e-6));
    }
    const Mask fp = layout_footprint(s.scene.width, s.scene.height, s.poses);
    for (int y = 0; y < s.scene.height; ++y)
      for (int x = 0; x < s.scene.width; ++x) {
        if (!fp.at(x, y)) {
          ASSERT_EQ(s.layout.pixel(x, y), s.scene.pixel(x, y));
        }
        if (!s.human_mask.at(x, y)) {
          ASSERT_EQ(s.human.pixel(x, y), s.scene.pixel(x, y));
        }
      }
  }
  EXPECT_EQ(ds.split(true).size(), 20u);
  EXPECT_EQ(ds.split(false).size(), 180u);
  fs::remove_all(dir);
}

TEST(Dataset, Errors) {
  EXPECT_THROW(load_dataset("/nonexistent/skeleguide"), IoError);
  const auto dir = temp_dir("bad");
  fs::create_directories(dir);
  std::ofstream(dir / kManifestName) << "{\"id\": 1}\n";
  EXPECT_THROW(load_dataset(dir), SchemaError);
  std::ofstream(dir / kManifestName) << "not json\n";
  EXPECT_THROW(load_dataset(dir), SchemaError);
  fs::remove_all(dir);
  EXPECT_THROW(build_dataset(1, 1, "/proc/skeleguide_cannot_write"), IoError);
}
