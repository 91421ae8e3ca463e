#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "skeleguide/checkpoint.hpp"
#include "skeleguide/dataset.hpp"
#include "skeleguide/errors.hpp"
#include "skeleguide/image.hpp"
#include "skeleguide/keypoints.hpp"
#include "skeleguide/pipeline.hpp"
#include "skeleguide/skeleton.hpp"
#include "skeleguide/synthworld.hpp"

namespace skeleguide {

inline constexpr double kPsnrCap = 99.0;
inline constexpr double kPckAlpha = 0.5;
inline constexpr double kValidityTolerance = 0.25;

/// Neck to hip midpoint.
inline double torso_length(const Pose& p) { return distance(p[Joint::neck], p.pelvis()); }

inline double mean_joint_distance(const Pose& a, const Pose& b) {
  double s = 0.0;
  for (int j = 0; j < kNumJoints; ++j) s += distance(a.joints[static_cast<std::size_t>(j)], b.joints[static_cast<std::size_t>(j)]);
  return s / kNumJoints;
}

/// Fraction of ground-truth joints matched within alpha times the GT torso length.
inline double pck(const KeypointDoc& pred, const KeypointDoc& gt, double alpha) {
  if (pred.width != gt.width || pred.height != gt.height) throw ShapeError("pck: canvases differ");
  if (gt.persons.empty()) return pred.persons.empty() ? 1.0 : 0.0;
  struct Pair {
    double d;
    std::size_t p, g;
  };
  std::vector<Pair> pairs;
  for (std::size_t p = 0; p < pred.persons.size(); ++p)
    for (std::size_t g = 0; g < gt.persons.size(); ++g)
      pairs.push_back({mean_joint_distance(pred.persons[p], gt.persons[g]), p, g});
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.d < b.d; });
  std::vector<bool> used_p(pred.persons.size()), used_g(gt.persons.size());
  int correct = 0;
  for (const auto& pr : pairs) {
    if (used_p[pr.p] || used_g[pr.g]) continue;
    used_p[pr.p] = used_g[pr.g] = true;
    const Pose& a = pred.persons[pr.p];
    const Pose& b = gt.persons[pr.g];
    const double thr = alpha * torso_length(b);
    for (int j = 0; j < kNumJoints; ++j)
      if (distance(a.joints[static_cast<std::size_t>(j)], b.joints[static_cast<std::size_t>(j)]) <= thr) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(kNumJoints * gt.persons.size());
}

namespace detail {

inline void require_same_dims(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw ShapeError("image dimensions differ");
}

/// 11-tap Gaussian, sigma 1.5, normalized.
inline std::array<double, 11> ssim_kernel() {
  std::array<double, 11> k{};
  double s = 0.0;
  for (int i = 0; i < 11; ++i) {
    k[static_cast<std::size_t>(i)] = std::exp(-((i - 5) * (i - 5)) / (2.0 * 1.5 * 1.5));
    s += k[static_cast<std::size_t>(i)];
  }
  for (auto& v : k) v /= s;
  return k;
}

/// Valid-mode separable filter of a w x h plane; output is (w-10) x (h-10).
inline std::vector<double> filter_valid(const std::vector<double>& src, int w, int h) {
  static const auto k = ssim_kernel();
  const int ow = w - 10, oh = h - 10;
  std::vector<double> tmp(static_cast<std::size_t>(ow) * h), out(static_cast<std::size_t>(ow) * oh);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < 11; ++i) s += k[static_cast<std::size_t>(i)] * src[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < 11; ++i) s += k[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

/// Mean SSIM over window centres whose pixel is in `keep` (all when null).
/// Window statistics use only `keep` pixels, with renormalized weights.
inline double ssim_masked(const Image& a, const Image& b, const Mask* keep) {
  require_same_dims(a, b);
  const int w = a.width, h = a.height;
  if (w < 11 || h < 11) throw ShapeError("ssim needs images of at least 11x11");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  std::vector<double> m(n, 1.0);
  if (keep)
    for (std::size_t i = 0; i < n; ++i) m[i] = keep->bits[i] ? 1.0 : 0.0;
  const auto wm = filter_valid(m, w, h);
  double total = 0.0;
  std::size_t count = 0;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> pa(n), pb(n), paa(n), pbb(n), pab(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double x = a.data[i * 3 + static_cast<std::size_t>(c)] * m[i];
      const double y = b.data[i * 3 + static_cast<std::size_t>(c)] * m[i];
      pa[i] = x;
      pb[i] = y;
      paa[i] = x * x;
      pbb[i] = y * y;
      pab[i] = x * y;
    }
    const auto fa = filter_valid(pa, w, h), fb = filter_valid(pb, w, h), faa = filter_valid(paa, w, h),
               fbb = filter_valid(pbb, w, h), fab = filter_valid(pab, w, h);
    const int ow = w - 10;
    for (std::size_t i = 0; i < fa.size(); ++i) {
      const int cx = static_cast<int>(i % static_cast<std::size_t>(ow)) + 5, cy = static_cast<int>(i / static_cast<std::size_t>(ow)) + 5;
      if (keep && !keep->at(cx, cy)) continue;
      const double z = wm[i];
      const double mu_a = fa[i] / z, mu_b = fb[i] / z;
      const double va = faa[i] / z - mu_a * mu_a, vb = fbb[i] / z - mu_b * mu_b, cov = fab[i] / z - mu_a * mu_b;
      total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
      ++count;
    }
  }
  if (count == 0) throw ContractViolation("ssim: no window centre in the evaluated region");
  return total / static_cast<double>(count);
}

inline double psnr_masked(const Image& a, const Image& b, const Mask* keep) {
  require_same_dims(a, b);
  double se = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < a.pixel_count(); ++i) {
    if (keep && !keep->bits[i]) continue;
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = static_cast<double>(a.data[i * 3 + c]) - static_cast<double>(b.data[i * 3 + c]);
      se += d * d;
    }
    count += 3;
  }
  if (count == 0) throw ContractViolation("psnr: empty evaluation region");
  const double mse = se / static_cast<double>(count);
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

}  // namespace detail

inline double psnr(const Image& a, const Image& b) { return detail::psnr_masked(a, b, nullptr); }
inline double ssim(const Image& a, const Image& b) { return detail::ssim_masked(a, b, nullptr); }

/// Person region predicted from keypoints: 6 px wide limbs and a head disc, dilated by 3 px.
inline Mask person_mask(const KeypointDoc& doc) {
  Mask m(doc.width, doc.height);
  Image scratch(doc.width, doc.height);
  for (const auto& p : doc.persons) {
    for (const auto& bone : kBones)
      for_capsule(doc.width, doc.height, p[bone.from], p[bone.to], 3.0, [&](int x, int y) { m.mark(x, y); });
    fill_disc(scratch, p[Joint::head], kHeadRadius, {}, &m);
  }
  return m.dilated(3);
}

struct RegionMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t area = 0;  // background pixels evaluated
};

inline RegionMetrics background_region_metrics(const Image& scene, const Image& generated, const KeypointDoc& pred) {
  detail::require_same_dims(scene, generated);
  if (pred.width != scene.width || pred.height != scene.height) throw ShapeError("keypoint canvas differs from image");
  Mask keep = person_mask(pred);
  for (auto& b : keep.bits) b = b ? 0 : 1;
  if (keep.count() == 0) throw ContractViolation("background region is empty");
  return {detail::psnr_masked(scene, generated, &keep), detail::ssim_masked(scene, generated, &keep), keep.count()};
}

/// Stage-1 layout counts as valid when it decodes to at least one person and every person passes.
inline bool pose_valid(const KeypointDoc& doc) {
  return !doc.persons.empty() && validate_skeleton(doc, kValidityTolerance).all_valid();
}

struct SampleRecord {
  std::uint64_t id = 0;
  bool failed = false;
  std::string error;
  std::optional<double> pck;  // absent when the model produces no layout
  double bg_psnr = 0.0;
  double bg_ssim = 0.0;
  std::size_t bg_area = 0;
  bool pose_valid = false;
  int persons = 0;
};

struct EvalAggregates {
  std::size_t evaluated = 0, failures = 0;
  double mean_pck = 0.0, median_pck = 0.0;
  double mean_psnr = 0.0, median_psnr = 0.0;
  double mean_ssim = 0.0, median_ssim = 0.0;
  double validity_rate = 0.0;
  double mean_persons = 0.0;
  friend bool operator==(const EvalAggregates&, const EvalAggregates&) = default;
};

struct EvalReport {
  nlohmann::ordered_json config;
  std::vector<SampleRecord> records;
  EvalAggregates aggregates;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Aggregates over records that did not fail; PCK over records that carry one.
inline EvalAggregates aggregate(const std::vector<SampleRecord>& records) {
  EvalAggregates a;
  std::vector<double> pcks, psnrs, ssims, persons;
  std::size_t valid = 0;
  for (const auto& r : records) {
    if (r.failed) {
      ++a.failures;
      continue;
    }
    ++a.evaluated;
    if (r.pck) pcks.push_back(*r.pck);
    psnrs.push_back(r.bg_psnr);
    ssims.push_back(r.bg_ssim);
    persons.push_back(r.persons);
    if (r.pose_valid) ++valid;
  }
  a.mean_pck = mean(pcks);
  a.median_pck = median(pcks);
  a.mean_psnr = mean(psnrs);
  a.median_psnr = median(psnrs);
  a.mean_ssim = mean(ssims);
  a.median_ssim = median(ssims);
  a.mean_persons = mean(persons);
  a.validity_rate = a.evaluated ? static_cast<double>(valid) / static_cast<double>(a.evaluated) : 0.0;
  return a;
}

inline nlohmann::ordered_json to_json(const SampleRecord& r) {
  nlohmann::ordered_json j{{"id", r.id}, {"failed", r.failed}};
  if (r.failed) {
    j["error"] = r.error;
    return j;
  }
  j["pck@0.5"] = r.pck ? nlohmann::ordered_json(*r.pck) : nlohmann::ordered_json(nullptr);
  j["background_psnr"] = r.bg_psnr;
  j["background_ssim"] = r.bg_ssim;
  j["background_area"] = r.bg_area;
  j["pose_valid"] = r.pose_valid;
  j["decoded_persons"] = r.persons;
  return j;
}

inline nlohmann::ordered_json to_json(const EvalAggregates& a) {
  return {{"evaluated", a.evaluated},         {"failures", a.failures},
          {"mean_pck@0.5", a.mean_pck},       {"median_pck@0.5", a.median_pck},
          {"mean_background_psnr", a.mean_psnr}, {"median_background_psnr", a.median_psnr},
          {"mean_background_ssim", a.mean_ssim}, {"median_background_ssim", a.median_ssim},
          {"pose_validity_rate", a.validity_rate}, {"mean_decoded_persons", a.mean_persons}};
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json samples = nlohmann::ordered_json::array();
  for (const auto& s : r.records) samples.push_back(to_json(s));
  return {{"config", r.config},
          {"aggregates", to_json(r.aggregates)},
          {"samples", samples},
          {"omitted_metrics", {"FID", "KID", "CLIP", "LPIPS", "HPSv2", "Elo"}}};
}

inline std::string serialize_report(const EvalReport& r) { return to_json(r).dump(2) + "\n"; }

struct EvalOptions {
  std::size_t count = 100;
  std::uint64_t seed = 0;
  int steps = kDefaultSamplingSteps;
  int batch = 8;
  bool ground_truth = false;  // bypass the model with the scene's own layout and image
};

inline std::uint64_t eval_sample_seed(std::uint64_t seed, std::uint64_t id) { return Rng::derive(seed, 0xE5A1ULL + id); }

inline SampleRecord score_sample(const Sample& s, const std::optional<Image>& layout, const Image& image) {
  SampleRecord r;
  r.id = s.id;
  const KeypointDoc gt = encode_keypoint_doc(s.poses, s.scene.width, s.scene.height);
  KeypointDoc region_doc = gt;
  if (layout) {
    const KeypointDoc pred = invert_layout(*layout).doc;
    r.pck = pck(pred, gt, kPckAlpha);
    r.pose_valid = pose_valid(pred);
    r.persons = static_cast<int>(pred.persons.size());
    region_doc = pred;
  }
  const RegionMetrics bg = background_region_metrics(s.scene, image, region_doc);
  r.bg_psnr = bg.psnr;
  r.bg_ssim = bg.ssim;
  r.bg_area = bg.area;
  return r;
}

/// Runs the checkpoint's inference path over the first `count` samples and scores them.
inline EvalReport evaluate(const Checkpoint& ck, const std::string& checkpoint_id, const Dataset& data,
                           const EvalOptions& opt) {
  if (opt.steps < 1) throw ConfigError("steps must be >= 1");
  if (opt.batch < 1) throw ConfigError("batch must be >= 1");
  EvalReport report;
  const std::size_t count = std::min(opt.count, data.samples.size());
  report.config = {{"checkpoint", checkpoint_id},
                   {"model_kind", opt.ground_truth ? "ground_truth" : to_string(model_kind(ck))},
                   {"phase", ck.state.phase},
                   {"count", count},
                   {"seed", opt.seed},
                   {"steps", opt.steps},
                   {"pck_alpha", kPckAlpha},
                   {"validity_tolerance", kValidityTolerance}};
  for (std::size_t start = 0; start < count; start += static_cast<std::size_t>(opt.batch)) {
    const std::size_t end = std::min(count, start + static_cast<std::size_t>(opt.batch));
    if (opt.ground_truth) {
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = data.samples[i];
        report.records.push_back(score_sample(s, s.layout, s.human));
      }
      continue;
    }
    std::vector<GenerationInput> inputs;
    for (std::size_t i = start; i < end; ++i)
      inputs.push_back({data.samples[i].scene, data.samples[i].prompt, eval_sample_seed(opt.seed, data.samples[i].id)});
    std::vector<GenerationOutput> outs;
    try {
      outs = generate(ck, inputs, opt.steps);
    } catch (const NumericalError&) {
      // isolate the failing samples by retrying one at a time
      for (std::size_t i = start; i < end; ++i) {
        try {
          const auto one = generate(ck, {inputs[i - start]}, opt.steps).front();
          report.records.push_back(score_sample(data.samples[i], one.layout, one.image));
        } catch (const NumericalError& e) {
          SampleRecord r;
          r.id = data.samples[i].id;
          r.failed = true;
          r.error = e.what();
          report.records.push_back(r);
        }
      }
      continue;
    }
    for (std::size_t i = start; i < end; ++i)
      report.records.push_back(score_sample(data.samples[i], outs[i - start].layout, outs[i - start].image));
  }
  report.aggregates = aggregate(report.records);
  return report;
}

}  // namespace skeleguide
