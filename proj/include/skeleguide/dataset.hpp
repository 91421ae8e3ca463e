#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "skeleguide/errors.hpp"
#include "skeleguide/image.hpp"
#include "skeleguide/keypoints.hpp"
#include "skeleguide/synthworld.hpp"

namespace skeleguide {

inline constexpr const char* kManifestName = "manifest.jsonl";

/// Every tenth sample (id % 10 == 9) is held out from training.
inline bool is_holdout(std::uint64_t id) { return id % 10 == 9; }

struct Dataset {
  std::filesystem::path root;
  std::vector<Sample> samples;

  std::vector<const Sample*> split(bool holdout) const {
    std::vector<const Sample*> out;
    for (const auto& s : samples)
      if (is_holdout(s.id) == holdout) out.push_back(&s);
    return out;
  }
};

namespace detail {

inline std::string sample_file(const char* kind, std::uint64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06llu.png", static_cast<unsigned long long>(id));
  return std::string(kind) + "/" + buf;
}

inline Image mask_image(const Mask& m) {
  Image img(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(x, y)) img.set(x, y, {1.0f, 1.0f, 1.0f});
  return img;
}

inline Mask image_mask(const Image& img) {
  Mask m(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (img.pixel(x, y)[0] > 0.5f) m.mark(x, y);
  return m;
}

}  // namespace detail

inline nlohmann::ordered_json manifest_entry(const Sample& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["seed"] = s.seed;
  j["files"] = {{"scene", detail::sample_file("scene", s.id)},
                {"layout", detail::sample_file("layout", s.id)},
                {"human", detail::sample_file("human", s.id)},
                {"mask", detail::sample_file("mask", s.id)}};
  j["prompt"] = {{"action", to_string(s.prompt.action)},
                 {"location", to_string(s.prompt.location)},
                 {"count", s.prompt.count},
                 {"token_ids", s.prompt.token_ids}};
  nlohmann::ordered_json scene{{"floor_y", s.scene_spec.floor_y}};
  if (s.scene_spec.bench) {
    const Rect& b = *s.scene_spec.bench;
    scene["bench"] = {b.x0, b.y0, b.x1, b.y1};
  } else {
    scene["bench"] = nullptr;
  }
  j["scene"] = scene;
  j["keypoints"] = to_json(encode_keypoint_doc(s.poses, s.scene.width, s.scene.height));
  return j;
}

/// Writes PNGs for every sample plus a JSON-lines manifest; returns the manifest path.
inline std::filesystem::path build_dataset(std::size_t count, std::uint64_t seed, const std::filesystem::path& out_dir,
                                           const WorldConfig& config = {}) {
  config.validate();
  std::error_code ec;
  for (const char* sub : {"scene", "layout", "human", "mask"}) {
    std::filesystem::create_directories(out_dir / sub, ec);
    if (ec) throw IoError((out_dir / sub).string(), ec.message());
  }
  const auto manifest = out_dir / kManifestName;
  std::ofstream out(manifest, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(manifest.string(), "cannot open for writing");
  for (std::size_t i = 0; i < count; ++i) {
    const Sample s = make_sample(i, sample_seed(seed, i), config);
    write_png(out_dir / detail::sample_file("scene", s.id), s.scene);
    write_png(out_dir / detail::sample_file("layout", s.id), s.layout);
    write_png(out_dir / detail::sample_file("human", s.id), s.human);
    write_png(out_dir / detail::sample_file("mask", s.id), detail::mask_image(s.human_mask));
    out << manifest_entry(s).dump() << '\n';
  }
  out.flush();
  if (!out) throw IoError(manifest.string(), "write failed");
  return manifest;
}

inline Sample sample_from_manifest(const nlohmann::json& j, const std::filesystem::path& root) {
  try {
    Sample s;
    s.id = j.at("id").get<std::uint64_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    const auto& files = j.at("files");
    s.scene = read_png(root / files.at("scene").get<std::string>());
    s.layout = read_png(root / files.at("layout").get<std::string>());
    s.human = read_png(root / files.at("human").get<std::string>());
    s.human_mask = detail::image_mask(read_png(root / files.at("mask").get<std::string>()));
    const auto& p = j.at("prompt");
    const auto action = parse_action(p.at("action").get<std::string>());
    const auto location = parse_location(p.at("location").get<std::string>());
    if (!action || !location) throw SchemaError("prompt", "unknown action or location");
    s.prompt = make_prompt(*action, *location, p.at("count").get<int>());
    s.scene_spec.width = s.scene.width;
    s.scene_spec.height = s.scene.height;
    s.scene_spec.floor_y = j.at("scene").at("floor_y").get<int>();
    if (!j.at("scene").at("bench").is_null()) {
      const auto b = j.at("scene").at("bench").get<std::array<int, 4>>();
      s.scene_spec.bench = Rect{b[0], b[1], b[2], b[3]};
    }
    s.scene_spec.seed = s.seed;
    s.poses = keypoint_doc_from_json(j.at("keypoints")).persons;
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("manifest", e.what());
  }
}

/// Loads a dataset directory; `limit` = 0 loads every line.
inline Dataset load_dataset(const std::filesystem::path& dir, std::size_t limit = 0) {
  const auto manifest = dir / kManifestName;
  std::ifstream in(manifest, std::ios::binary);
  if (!in) throw IoError(manifest.string(), "cannot open manifest");
  Dataset ds{dir, {}};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("line " + std::to_string(lineno), e.what());
    }
    ds.samples.push_back(sample_from_manifest(j, dir));
    if (limit && ds.samples.size() >= limit) break;
  }
  return ds;
}

}  // namespace skeleguide
