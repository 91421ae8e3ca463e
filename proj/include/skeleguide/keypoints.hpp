#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "skeleguide/errors.hpp"
#include "skeleguide/image.hpp"
#include "skeleguide/skeleton.hpp"
#include "skeleguide/synthworld.hpp"

namespace skeleguide {

/// Editable keypoint document; the wire format is documented in docs/formats.md.
struct KeypointDoc {
  int width = 0;
  int height = 0;
  std::vector<Pose> persons;
  friend bool operator==(const KeypointDoc&, const KeypointDoc&) = default;
};

inline KeypointDoc encode_keypoint_doc(const std::vector<Pose>& poses, int width, int height) {
  return {width, height, poses};
}

inline nlohmann::ordered_json to_json(const KeypointDoc& doc) {
  nlohmann::ordered_json j;
  j["canvas"] = {{"width", doc.width}, {"height", doc.height}};
  auto persons = nlohmann::ordered_json::array();
  for (const auto& p : doc.persons) {
    nlohmann::ordered_json joints = nlohmann::ordered_json::object();
    for (int k = 0; k < kNumJoints; ++k) {
      const auto& pt = p.joints[static_cast<std::size_t>(k)];
      joints[std::string(kJointNames[static_cast<std::size_t>(k)])] = {{"x", pt.x}, {"y", pt.y}};
    }
    persons.push_back({{"person_index", p.person_index}, {"joints", std::move(joints)}});
  }
  j["persons"] = std::move(persons);
  return j;
}

inline std::string serialize_keypoint_doc(const KeypointDoc& doc, int indent = -1) { return to_json(doc).dump(indent); }

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw SchemaError(path.empty() ? key : path + "." + key, "unknown field");
  }
}

inline const nlohmann::json& require(const nlohmann::json& obj, const std::string& path, const char* key) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw SchemaError(path.empty() ? std::string(key) : path + "." + key, "missing field");
  return *it;
}

inline int canvas_dimension(const nlohmann::json& v, const std::string& path) {
  if (!v.is_number_integer()) throw SchemaError(path, "expected an integer");
  if (v.is_number_unsigned() ? v.get<std::uint64_t>() > 8192u : (v.get<std::int64_t>() < 1 || v.get<std::int64_t>() > 8192))
    throw SchemaError(path, "canvas dimension must be in [1, 8192]");
  if (v.get<std::int64_t>() < 1) throw SchemaError(path, "canvas dimension must be in [1, 8192]");
  return static_cast<int>(v.get<std::int64_t>());
}

inline double coordinate(const nlohmann::json& v, const std::string& path, int extent) {
  if (!v.is_number()) throw SchemaError(path, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw SchemaError(path, "coordinate is not finite");
  if (d < 0.0 || d > extent - 1) throw SchemaError(path, "coordinate outside canvas");
  return d;
}

}  // namespace detail

/// Checks a decoded document's invariants; the error path names the first offender.
inline void check_keypoint_doc(const KeypointDoc& doc) {
  if (doc.width < 1 || doc.height < 1) throw SchemaError("canvas", "canvas dimensions must be positive");
  std::set<int> seen;
  for (std::size_t i = 0; i < doc.persons.size(); ++i) {
    const auto& p = doc.persons[i];
    const std::string base = "persons[" + std::to_string(i) + "]";
    if (p.person_index < 0) throw SchemaError(base + ".person_index", "must be non-negative");
    if (!seen.insert(p.person_index).second) throw SchemaError(base + ".person_index", "duplicate person_index");
    for (int k = 0; k < kNumJoints; ++k) {
      const auto& pt = p.joints[static_cast<std::size_t>(k)];
      const std::string jp = base + ".joints." + std::string(kJointNames[static_cast<std::size_t>(k)]);
      if (!std::isfinite(pt.x) || pt.x < 0.0 || pt.x > doc.width - 1) throw SchemaError(jp + ".x", "coordinate outside canvas");
      if (!std::isfinite(pt.y) || pt.y < 0.0 || pt.y > doc.height - 1) throw SchemaError(jp + ".y", "coordinate outside canvas");
    }
  }
  for (std::size_t i = 0; i < doc.persons.size(); ++i)
    if (doc.persons[i].person_index >= static_cast<int>(doc.persons.size()))
      throw SchemaError("persons[" + std::to_string(i) + "].person_index", "person_index values must be contiguous from 0");
}

inline KeypointDoc keypoint_doc_from_json(const nlohmann::json& root) {
  if (!root.is_object()) throw SchemaError("$", "document must be a JSON object");
  detail::reject_unknown_keys(root, "", {"canvas", "persons"});
  const auto& canvas = detail::require(root, "", "canvas");
  if (!canvas.is_object()) throw SchemaError("canvas", "expected an object");
  detail::reject_unknown_keys(canvas, "canvas", {"width", "height"});
  KeypointDoc doc;
  doc.width = detail::canvas_dimension(detail::require(canvas, "canvas", "width"), "canvas.width");
  doc.height = detail::canvas_dimension(detail::require(canvas, "canvas", "height"), "canvas.height");

  const auto& persons = detail::require(root, "", "persons");
  if (!persons.is_array()) throw SchemaError("persons", "expected an array");
  std::set<int> seen;
  for (std::size_t i = 0; i < persons.size(); ++i) {
    const auto& pj = persons[i];
    const std::string base = "persons[" + std::to_string(i) + "]";
    if (!pj.is_object()) throw SchemaError(base, "expected an object");
    detail::reject_unknown_keys(pj, base, {"person_index", "joints"});
    const auto& index = detail::require(pj, base, "person_index");
    if (!index.is_number_integer() || (!index.is_number_unsigned() && index.get<std::int64_t>() < 0) ||
        (index.is_number_unsigned() && index.get<std::uint64_t>() > 1024u))
      throw SchemaError(base + ".person_index", "expected a non-negative integer");
    Pose pose;
    pose.person_index = static_cast<int>(index.get<std::int64_t>());
    if (!seen.insert(pose.person_index).second) throw SchemaError(base + ".person_index", "duplicate person_index");
    const auto& joints = detail::require(pj, base, "joints");
    const std::string jbase = base + ".joints";
    if (!joints.is_object()) throw SchemaError(jbase, "expected an object");
    for (const auto& [name, value] : joints.items()) {
      (void)value;
      if (!joint_index(name)) throw SchemaError(jbase + "." + name, "unknown joint");
    }
    for (int k = 0; k < kNumJoints; ++k) {
      const std::string name(kJointNames[static_cast<std::size_t>(k)]);
      const std::string path = jbase + "." + name;
      const auto it = joints.find(name);
      if (it == joints.end()) throw SchemaError(path, "missing joint");
      if (!it->is_object()) throw SchemaError(path, "expected an object with x and y");
      detail::reject_unknown_keys(*it, path, {"x", "y"});
      auto& pt = pose.joints[static_cast<std::size_t>(k)];
      pt.x = detail::coordinate(detail::require(*it, path, "x"), path + ".x", doc.width);
      pt.y = detail::coordinate(detail::require(*it, path, "y"), path + ".y", doc.height);
    }
    doc.persons.push_back(pose);
  }
  check_keypoint_doc(doc);
  return doc;
}

/// Strict parser: never crashes on arbitrary bytes; every failure is a SchemaError.
inline KeypointDoc parse_keypoint_doc(std::string_view text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("$", std::string("invalid JSON: ") + e.what());
  }
  try {
    return keypoint_doc_from_json(root);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("$", e.what());
  }
}

// ---------------------------------------------------------------------------
// Layout inversion

struct InversionResult {
  KeypointDoc doc;
  std::vector<std::string> warnings;
};

/// Per-channel distance within which a pixel is classified as a palette color.
inline constexpr float kClassifyThreshold = 32.0f / 255.0f;
inline constexpr int kMinDetectedJoints = 10;

/// Decodes a layout image back into keypoints by palette classification.
///
/// Each pixel takes the label of its nearest palette color if that color is
/// within kClassifyThreshold on every channel. A joint is the centroid of its
/// largest 8-connected blob; persons come from the hue band of the palette.
inline InversionResult invert_layout(const Image& layout) {
  if (layout.width < 1 || layout.height < 1) throw ShapeError("layout image is empty");
  constexpr int kJointLabels = kMaxPersons * kNumJoints;
  struct Entry {
    Rgb color;
    int label;  // joint labels first, then bone labels (ignored)
  };
  std::vector<Entry> palette;
  for (int p = 0; p < kMaxPersons; ++p)
    for (int j = 0; j < kNumJoints; ++j) palette.push_back({joint_color(p, j), p * kNumJoints + j});
  for (int p = 0; p < kMaxPersons; ++p) palette.push_back({bone_color(p), kJointLabels + p});

  const int w = layout.width, h = layout.height;
  std::vector<int> labels(static_cast<std::size_t>(w) * h, -1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Rgb px = layout.pixel(x, y);
      float best = std::numeric_limits<float>::max();
      int best_label = -1;
      for (const auto& e : palette) {
        const float d = color_distance(px, e.color);
        if (d < best) {
          best = d;
          best_label = e.label;
        }
      }
      if (best <= kClassifyThreshold + 1e-6f) labels[static_cast<std::size_t>(y) * w + x] = best_label;
    }

  InversionResult result;
  std::vector<std::array<std::optional<Point>, kNumJoints>> found(kMaxPersons);
  std::vector<std::uint8_t> visited(labels.size(), 0);
  std::vector<std::vector<std::vector<std::pair<int, int>>>> components(kJointLabels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const int label = labels[i];
      if (label < 0 || label >= kJointLabels || visited[i]) continue;
      std::vector<std::pair<int, int>> comp;
      std::deque<std::pair<int, int>> queue{{x, y}};
      visited[i] = 1;
      while (!queue.empty()) {
        const auto [cx, cy] = queue.front();
        queue.pop_front();
        comp.emplace_back(cx, cy);
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = cx + dx, ny = cy + dy;
            if (!layout.contains(nx, ny)) continue;
            const std::size_t ni = static_cast<std::size_t>(ny) * w + nx;
            if (!visited[ni] && labels[ni] == label) {
              visited[ni] = 1;
              queue.emplace_back(nx, ny);
            }
          }
      }
      components[static_cast<std::size_t>(label)].push_back(std::move(comp));
    }

  for (int label = 0; label < kJointLabels; ++label) {
    auto& comps = components[static_cast<std::size_t>(label)];
    if (comps.empty()) continue;
    const int person = label / kNumJoints, joint = label % kNumJoints;
    std::size_t best = 0;
    for (std::size_t c = 1; c < comps.size(); ++c)
      if (comps[c].size() > comps[best].size()) best = c;
    if (comps.size() > 1)
      result.warnings.push_back("hue band " + std::to_string(person) + " joint " +
                                std::string(kJointNames[static_cast<std::size_t>(joint)]) + ": " +
                                std::to_string(comps.size()) + " disconnected blobs, kept the largest");
    double sx = 0.0, sy = 0.0;
    for (const auto& [px, py] : comps[best]) {
      sx += px;
      sy += py;
    }
    const double n = static_cast<double>(comps[best].size());
    found[static_cast<std::size_t>(person)][static_cast<std::size_t>(joint)] = Point{sx / n, sy / n};
  }

  for (int p = 0; p < kMaxPersons; ++p) {
    auto& joints = found[static_cast<std::size_t>(p)];
    const int detected = static_cast<int>(std::count_if(joints.begin(), joints.end(), [](const auto& j) { return j.has_value(); }));
    if (detected == 0) continue;
    if (detected < kMinDetectedJoints) {
      result.warnings.push_back("hue band " + std::to_string(p) + ": only " + std::to_string(detected) +
                                " joints detected, person dropped");
      continue;
    }
    // Missing joints take the position of the nearest detected joint along the bone graph.
    while (std::any_of(joints.begin(), joints.end(), [](const auto& j) { return !j.has_value(); })) {
      for (const auto& bone : kBones) {
        auto& a = joints[static_cast<std::size_t>(idx(bone.from))];
        auto& b = joints[static_cast<std::size_t>(idx(bone.to))];
        if (a && !b) {
          b = a;
          result.warnings.push_back("hue band " + std::to_string(p) + " joint " +
                                    std::string(kJointNames[static_cast<std::size_t>(idx(bone.to))]) + " not found, imputed");
        } else if (b && !a) {
          a = b;
          result.warnings.push_back("hue band " + std::to_string(p) + " joint " +
                                    std::string(kJointNames[static_cast<std::size_t>(idx(bone.from))]) + " not found, imputed");
        }
      }
    }
    Pose pose;
    for (int j = 0; j < kNumJoints; ++j) pose.joints[static_cast<std::size_t>(j)] = *joints[static_cast<std::size_t>(j)];
    result.doc.persons.push_back(pose);
  }
  std::stable_sort(result.doc.persons.begin(), result.doc.persons.end(),
                   [](const Pose& a, const Pose& b) { return a.pelvis().x < b.pelvis().x; });
  for (std::size_t i = 0; i < result.doc.persons.size(); ++i) result.doc.persons[i].person_index = static_cast<int>(i);
  result.doc.width = w;
  result.doc.height = h;
  return result;
}

// ---------------------------------------------------------------------------
// Validation

struct PersonValidity {
  int person_index = 0;
  bool valid = true;
  std::vector<std::string> violating_bones;
};

struct ValidityReport {
  std::vector<PersonValidity> persons;
  bool all_valid() const {
    return std::all_of(persons.begin(), persons.end(), [](const auto& p) { return p.valid; });
  }
};

/// Bone lengths against the sampler ranges widened to [min(1-t), max(1+t)].
inline ValidityReport validate_skeleton(const KeypointDoc& doc, double tolerance) {
  ValidityReport report;
  for (const auto& p : doc.persons) {
    PersonValidity pv;
    pv.person_index = p.person_index;
    for (int b = 0; b < kNumBones; ++b) {
      const auto& bone = kBones[static_cast<std::size_t>(b)];
      const double len = distance(p[bone.from], p[bone.to]);
      const auto r = bone_range(b, doc.height);
      if (len < r.min * (1.0 - tolerance) || len > r.max * (1.0 + tolerance)) {
        pv.valid = false;
        pv.violating_bones.push_back(bone_name(bone));
      }
    }
    report.persons.push_back(std::move(pv));
  }
  return report;
}

}  // namespace skeleguide
