#pragma once

#include <string>
#include <vector>

#include "skeleguide/backbone.hpp"
#include "skeleguide/curriculum.hpp"
#include "skeleguide/flowmatch.hpp"
#include "skeleguide/synthworld.hpp"

namespace skeleguide {

/// Overwrites every parameter with Gaussian noise so that all paths carry signal.
template <class T>
void randomize_params(Backbone<T>& model, std::uint64_t seed, double std = 0.2) {
  Rng rng(seed);
  for (const auto& [name, v] : model.params()) {
    auto& m = model.param(name).mutable_value();
    const double s = name.find("pos") != std::string::npos || name.find("embed") != std::string::npos ? 1.0 : std;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(s * rng.normal());
  }
}

// Central-difference step. The losses sum thousands of terms, so round-off in the
// loss value dominates below this step while truncation error stays near 1e-6.
inline constexpr double kGradcheckStep = 1e-3;

struct GradcheckCase {
  std::string name;
  GradcheckReport report;
  double tolerance = 1e-4;
  bool passed() const { return report.passed(tolerance); }
};

inline ModelConfig gradcheck_model_config(int blocks, int image_size, std::uint64_t seed) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_blocks = blocks;
  c.lora_rank = 2;
  c.image_size = image_size;
  c.seed = seed;
  return c;
}

/// fm_loss through a one-block backbone, every parameter tensor sampled, 64-bit.
inline GradcheckCase gradcheck_fm_loss(std::uint64_t seed, std::size_t per_tensor = 6) {
  Backbone<double> model(gradcheck_model_config(1, 16, seed));
  randomize_params(model, Rng::derive(seed, 1), 0.2);
  const auto& c = model.config();
  Rng rng(Rng::derive(seed, 2));
  const int groups = 2;
  const ag::Mat<double> x1 = normal_matrix<double>(rng, groups * c.grid_tokens(), c.noise_patch_dim);
  const ag::Mat<double> x0 = normal_matrix<double>(rng, groups * c.grid_tokens(), c.noise_patch_dim);
  const ag::Mat<double> cond = normal_matrix<double>(rng, groups * c.grid_tokens(), c.cond_patch_dim);
  const std::vector<double> t{0.3, 0.8};
  const std::vector<int> text{vocab::task_layout, vocab::standing, vocab::left, vocab::one,
                              vocab::task_layout, vocab::sitting, vocab::right, vocab::two};
  ag::Mat<double> xt(x1.rows(), x1.cols());
  const Eigen::Index n = c.grid_tokens();
  for (int g = 0; g < groups; ++g)
    xt.middleRows(g * n, n) = (1 - t[static_cast<std::size_t>(g)]) * x0.middleRows(g * n, n) +
                              t[static_cast<std::size_t>(g)] * x1.middleRows(g * n, n);
  const auto loss = [&] {
    return fm_loss(model.forward(ag::constant(xt), t, ag::constant(cond), text, Adapter::skeletal),
                   ag::constant<double>(x1 - x0));
  };
  std::vector<std::pair<std::string, ag::Var<double>>> params;
  for (const auto& [name, v] : model.params())
    if (!Backbone<double>::is_adapter_param(name, Adapter::appearance)) params.emplace_back(name, v);
  return {"fm_loss through 1-block backbone", gradcheck<double>(loss, params, {kGradcheckStep, per_tensor, 1e-6, seed}), 1e-4};
}

/// Joint-phase total loss through the one-step derivation w.r.t. the skeletal adapter factors, 64-bit.
inline GradcheckCase gradcheck_joint_loss(std::uint64_t seed, std::size_t per_tensor = 8, double lambda_reason = 0.5) {
  const ModelConfig c = gradcheck_model_config(2, 64, seed);
  Backbone<double> model(c);
  randomize_params(model, Rng::derive(seed, 3), 0.2);
  const WorldConfig wc;
  std::vector<EncodedSample> samples;
  for (std::uint64_t i = 0; samples.size() < 2 && i < 64; ++i) {
    try {
      samples.push_back(encode_sample(make_sample(i, sample_seed(seed, i), wc), c.patch));
    } catch (const InconsistencyError&) {
      // a scene without room for any prompt is skipped
    }
  }
  if (samples.size() < 2) throw InconsistencyError("no usable gradcheck scenes");
  const Batch<double> batch = make_batch<double>({&samples[0], &samples[1]});
  Rng main(Rng::derive(seed, 4)), render(Rng::derive(seed, 5));
  const FlowNoise<double> noise =
      draw_noise<double>(main, render, 2, c.grid_tokens(), c.noise_patch_dim, c.cond_patch_dim, true);
  PhaseConfig cfg = PhaseConfig::for_phase(Phase::joint);
  cfg.lambda_reason = lambda_reason;
  const auto loss = [&] { return phase_loss(model, cfg, batch, noise).total; };
  std::vector<std::pair<std::string, ag::Var<double>>> params;
  for (const auto& name : model.adapter_params(Adapter::skeletal)) params.emplace_back(name, model.param(name));
  const std::string name = lambda_reason == 0.0 ? "joint render-only loss w.r.t. skeletal adapter"
                                                 : "joint total loss w.r.t. skeletal adapter";
  return {name, gradcheck<double>(loss, params, {kGradcheckStep, per_tensor, 1e-6, seed}),
          1e-4};
}

inline std::vector<GradcheckCase> gradcheck_suite(std::uint64_t seed) {
  return {gradcheck_fm_loss(seed), gradcheck_joint_loss(seed)};
}

}  // namespace skeleguide
