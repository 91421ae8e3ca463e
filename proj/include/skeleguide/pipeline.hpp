#pragma once

#include <optional>
#include <string>
#include <vector>

#include "skeleguide/autograd.hpp"
#include "skeleguide/backbone.hpp"
#include "skeleguide/checkpoint.hpp"
#include "skeleguide/curriculum.hpp"
#include "skeleguide/flowmatch.hpp"
#include "skeleguide/keypoints.hpp"
#include "skeleguide/synthworld.hpp"

namespace skeleguide {

inline constexpr int kDefaultSamplingSteps = 25;

/// How a checkpoint turns a scene into an image.
enum class ModelKind { two_stage, single_stage, implicit };

inline ModelKind model_kind(const Checkpoint& ck) {
  if (ck.state.phase == to_string(Phase::single_stage)) return ModelKind::single_stage;
  if (ck.state.phase == to_string(Phase::implicit)) return ModelKind::implicit;
  return ModelKind::two_stage;
}

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::two_stage: return "two_stage";
    case ModelKind::single_stage: return "single_stage";
    case ModelKind::implicit: return "implicit";
  }
  return "?";
}

/// One scene and prompt to generate from, with its own sampling seed.
struct GenerationInput {
  Image scene;
  PromptSpec prompt;
  std::uint64_t seed = 0;
};

struct GenerationOutput {
  std::optional<ag::Mat<float>> layout_latent;  // absent for the single-stage model
  std::optional<Image> layout;
  std::optional<InversionResult> inversion;
  Image image;
};

namespace detail {

inline constexpr std::uint64_t kStage1NoiseTag = 0x57A1;
inline constexpr std::uint64_t kStage2NoiseTag = 0x57A2;

inline ag::Mat<float> stack_rows(const std::vector<ag::Mat<float>>& parts) {
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p.rows();
  ag::Mat<float> out(rows, parts.front().cols());
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p;
    off += p.rows();
  }
  return out;
}

inline Image finish_image(const ag::Mat<float>& rows, int size, int patch) {
  Image img = rows_image(rows, size, patch);
  quantize(img);
  return img;
}

}  // namespace detail

/// Euler sampling of a batch; every sample draws its start noise from its own seed.
inline ag::Mat<float> sample_batch(const Backbone<float>& model, const ag::Mat<float>& cond,
                                   const std::vector<int>& text, const std::vector<std::uint64_t>& seeds,
                                   std::uint64_t tag, Adapter adapter, int steps) {
  const int groups = static_cast<int>(seeds.size());
  const int n = model.config().grid_tokens(), dim = model.config().noise_patch_dim;
  ag::Mat<float> x(static_cast<Eigen::Index>(groups) * n, dim);
  for (int g = 0; g < groups; ++g) {
    Rng rng(Rng::derive(seeds[static_cast<std::size_t>(g)], tag));
    x.middleRows(static_cast<Eigen::Index>(g) * n, n) = normal_matrix<float>(rng, n, dim);
  }
  ag::NoGradGuard guard;
  ag::FlushDenormals ftz;
  const ag::Var<float> c = cond.size() ? ag::constant<float>(cond) : ag::Var<float>();
  const BatchField<float> field = [&](const ag::Mat<float>& xs, const std::vector<float>& t) {
    return model.forward(ag::constant<float>(xs), t, c, text, adapter).value();
  };
  return euler_sample(field, std::move(x), groups, steps);
}

inline std::vector<int> batch_text(const std::vector<GenerationInput>& inputs, int task) {
  std::vector<int> text;
  for (const auto& in : inputs)
    for (int id : task_text(task, in.prompt.token_ids)) text.push_back(id);
  return text;
}

inline ag::Mat<float> scene_rows(const std::vector<GenerationInput>& inputs, int patch) {
  std::vector<ag::Mat<float>> parts;
  for (const auto& in : inputs) parts.push_back(latent_rows(in.scene, patch));
  return detail::stack_rows(parts);
}

/// Stage 1: scene and prompt to layout latent, skeletal adapter.
inline ag::Mat<float> reason_layouts(const Backbone<float>& model, const std::vector<GenerationInput>& inputs,
                                     int steps) {
  std::vector<std::uint64_t> seeds;
  for (const auto& in : inputs) seeds.push_back(in.seed);
  return sample_batch(model, scene_rows(inputs, model.config().patch), batch_text(inputs, vocab::task_layout), seeds,
                      detail::kStage1NoiseTag, Adapter::skeletal, steps);
}

/// Stage 2: layout latent to final image latent, appearance adapter.
inline ag::Mat<float> render_images(const Backbone<float>& model, const ag::Mat<float>& layouts,
                                    const std::vector<GenerationInput>& inputs, int steps) {
  std::vector<std::uint64_t> seeds;
  for (const auto& in : inputs) seeds.push_back(in.seed);
  return sample_batch(model, layouts, batch_text(inputs, vocab::task_human), seeds, detail::kStage2NoiseTag,
                      Adapter::appearance, steps);
}

/// Full inference for a batch of scenes. Stage 2 conditions on the raw Stage-1 latent.
inline std::vector<GenerationOutput> generate(const Checkpoint& ck, const std::vector<GenerationInput>& inputs,
                                              int steps = kDefaultSamplingSteps) {
  if (inputs.empty()) return {};
  const auto& mc = ck.model.config();
  for (const auto& in : inputs)
    if (in.scene.width != mc.image_size || in.scene.height != mc.image_size)
      throw UnsupportedError("scene is " + std::to_string(in.scene.width) + "x" + std::to_string(in.scene.height) +
                             ", model expects " + std::to_string(mc.image_size) + "x" + std::to_string(mc.image_size));
  const int n = mc.grid_tokens(), size = mc.image_size, patch = mc.patch;
  std::vector<GenerationOutput> out(inputs.size());
  const ModelKind kind = model_kind(ck);
  if (kind == ModelKind::two_stage) {
    const ag::Mat<float> layouts = reason_layouts(ck.model, inputs, steps);
    const ag::Mat<float> images = render_images(ck.model, layouts, inputs, steps);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      out[i].layout_latent = layouts.middleRows(static_cast<Eigen::Index>(i) * n, n);
      out[i].image = detail::finish_image(images.middleRows(static_cast<Eigen::Index>(i) * n, n), size, patch);
    }
  } else {
    std::vector<std::uint64_t> seeds;
    for (const auto& in : inputs) seeds.push_back(in.seed);
    const ag::Mat<float> joint =
        sample_batch(ck.model, scene_rows(inputs, patch), batch_text(inputs, vocab::task_human), seeds,
                     detail::kStage2NoiseTag, Adapter::appearance, steps);
    const Eigen::Index d = mc.cond_patch_dim;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const auto rows = joint.middleRows(static_cast<Eigen::Index>(i) * n, n);
      out[i].image = detail::finish_image(rows.leftCols(d), size, patch);
      if (kind == ModelKind::implicit) out[i].layout_latent = rows.rightCols(d);
    }
  }
  for (auto& o : out)
    if (o.layout_latent) {
      o.layout = detail::finish_image(*o.layout_latent, size, patch);
      o.inversion = invert_layout(*o.layout);
    }
  return out;
}

/// Stage 2 alone from a layout image, as used after a keypoint edit.
inline Image render_from_layout(const Checkpoint& ck, const Image& layout, const PromptSpec& prompt, std::uint64_t seed,
                                int steps = kDefaultSamplingSteps) {
  if (model_kind(ck) != ModelKind::two_stage) throw UnsupportedError("checkpoint has no separate rendering stage");
  const auto& mc = ck.model.config();
  if (layout.width != mc.image_size || layout.height != mc.image_size)
    throw UnsupportedError("layout size does not match the model");
  const std::vector<GenerationInput> inputs{{layout, prompt, seed}};
  return detail::finish_image(render_images(ck.model, latent_rows(layout, mc.patch), inputs, steps), mc.image_size,
                              mc.patch);
}

}  // namespace skeleguide
