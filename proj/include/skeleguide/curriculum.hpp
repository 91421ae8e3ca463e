#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>
#include <vector>

#include "skeleguide/autograd.hpp"
#include "skeleguide/backbone.hpp"
#include "skeleguide/checkpoint.hpp"
#include "skeleguide/dataset.hpp"
#include "skeleguide/errors.hpp"
#include "skeleguide/flowmatch.hpp"
#include "skeleguide/latent.hpp"
#include "skeleguide/rng.hpp"
#include "skeleguide/synthworld.hpp"

namespace skeleguide {

enum class Phase { pretrain, reason, joint, finetune, single_stage, implicit };
enum class Trainable { backbone, skeletal, appearance, skeletal_appearance };
enum class CondSource { none, online_derived, ground_truth };

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::pretrain: return "0";
    case Phase::reason: return "1";
    case Phase::joint: return "2";
    case Phase::finetune: return "3";
    case Phase::single_stage: return "single";
    case Phase::implicit: return "implicit";
  }
  return "?";
}

inline Phase parse_phase(std::string_view s) {
  if (s == "0") return Phase::pretrain;
  if (s == "1") return Phase::reason;
  if (s == "2") return Phase::joint;
  if (s == "3") return Phase::finetune;
  if (s == "single" || s == "single_stage") return Phase::single_stage;
  if (s == "implicit") return Phase::implicit;
  throw ConfigError("unknown phase '" + std::string(s) + "'");
}

inline std::string_view to_string(Trainable t) {
  switch (t) {
    case Trainable::backbone: return "backbone";
    case Trainable::skeletal: return "skeletal";
    case Trainable::appearance: return "appearance";
    case Trainable::skeletal_appearance: return "skeletal+appearance";
  }
  return "?";
}

inline std::string_view to_string(CondSource c) {
  switch (c) {
    case CondSource::none: return "none";
    case CondSource::online_derived: return "online_derived";
    case CondSource::ground_truth: return "ground_truth";
  }
  return "?";
}

/// Phase-0 pretraining targets, chosen per step.
enum class PretrainTask { layout, human, scene };

struct PhaseConfig {
  Phase phase = Phase::pretrain;
  Trainable trainable = Trainable::backbone;
  double lambda_reason = 0.5;
  double lambda_render = 1.0;
  CondSource conditioning = CondSource::none;  // source of the layout condition for rendering
  std::int64_t steps = 0;
  double lr = 1e-4;
  int batch_size = 8;
  std::uint64_t seed = 0;
  int log_every = 50;
  int heldout_count = 64;

  static PhaseConfig for_phase(Phase p, std::int64_t steps = 0, std::uint64_t seed = 0) {
    PhaseConfig c;
    c.phase = p;
    c.steps = steps;
    c.seed = seed;
    switch (p) {
      case Phase::pretrain: c.trainable = Trainable::backbone; break;
      case Phase::reason: c.trainable = Trainable::skeletal; break;
      case Phase::joint:
        c.trainable = Trainable::skeletal_appearance;
        c.conditioning = CondSource::online_derived;
        break;
      case Phase::finetune:
        c.trainable = Trainable::appearance;
        c.conditioning = CondSource::ground_truth;
        break;
      case Phase::single_stage:
      case Phase::implicit: c.trainable = Trainable::appearance; break;
    }
    return c;
  }

  void validate() const {
    auto fail = [&](const std::string& what) { throw ConfigError("phase " + std::string(to_string(phase)) + ": " + what); };
    if (phase == Phase::pretrain && trainable != Trainable::backbone) fail("pretraining trains the backbone");
    if (phase != Phase::pretrain && trainable == Trainable::backbone) fail("the backbone is frozen after pretraining");
    if (phase == Phase::reason && trainable != Trainable::skeletal) fail("trainable set must be the skeletal adapter only");
    if (phase == Phase::joint && conditioning != CondSource::online_derived) fail("conditioning must be online_derived");
    if (phase == Phase::finetune && trainable != Trainable::appearance)
      fail("trainable set must be the appearance adapter only");
    if (phase == Phase::finetune && conditioning != CondSource::ground_truth) fail("conditioning must be ground_truth");
    if ((phase == Phase::single_stage || phase == Phase::implicit) && trainable != Trainable::appearance)
      fail("baselines train a single adapter set");
    if (!std::isfinite(lambda_reason) || lambda_reason < 0) fail("lambda_reason must be finite and >= 0");
    if (!std::isfinite(lambda_render) || lambda_render < 0) fail("lambda_render must be finite and >= 0");
    if (!std::isfinite(lr) || lr < 0) fail("lr must be finite and >= 0");
    if (steps < 0) fail("steps must be >= 0");
    if (batch_size < 1) fail("batch size must be >= 1");
    if (log_every < 1) fail("log_every must be >= 1");
    if (heldout_count < 0) fail("heldout_count must be >= 0");
  }

  nlohmann::ordered_json to_json() const {
    return {{"phase", to_string(phase)},   {"trainable", to_string(trainable)},
            {"lambda_reason", lambda_reason}, {"lambda_render", lambda_render},
            {"conditioning", to_string(conditioning)}, {"steps", steps},
            {"lr", lr},                       {"batch_size", batch_size},
            {"seed", seed},                   {"log_every", log_every},
            {"heldout_count", heldout_count}};
  }

  /// Identity of a run for resume checks; the step budget may be extended.
  std::uint64_t hash() const {
    auto j = to_json();
    j.erase("steps");
    return fnv1a(j.dump());
  }
};

/// Dataset sample as patch tokens, ready for batching.
struct EncodedSample {
  std::uint64_t id = 0;
  ag::Mat<float> scene, layout, human;
  std::array<int, kPromptLength> prompt{};
};

struct TrainingSet {
  std::vector<EncodedSample> train, holdout;
};

inline ag::Mat<float> latent_rows(const Image& img, int patch) {
  const LatentGrid<float> g = encode_latent<float>(img, patch);
  return Eigen::Map<const ag::Mat<float>>(g.tokens.data(), g.n_tokens(), g.dim());
}

inline Image rows_image(const ag::Mat<float>& rows, int size, int patch) {
  LatentGrid<float> g(size, size, patch);
  if (rows.size() != static_cast<Eigen::Index>(g.tokens.size())) throw ShapeError("token rows do not match the image size");
  std::copy(rows.data(), rows.data() + rows.size(), g.tokens.begin());
  return decode_latent(g);
}

inline EncodedSample encode_sample(const Sample& s, int patch) {
  return {s.id, latent_rows(s.scene, patch), latent_rows(s.layout, patch), latent_rows(s.human, patch),
          s.prompt.token_ids};
}

inline TrainingSet encode_dataset(const Dataset& ds, int patch = 8) {
  TrainingSet out;
  for (const auto& s : ds.samples) (is_holdout(s.id) ? out.holdout : out.train).push_back(encode_sample(s, patch));
  return out;
}

/// Prompt ids with the leading slot replaced by a task token.
inline std::array<int, kPromptLength> task_text(int task, const std::array<int, kPromptLength>& prompt) {
  auto t = prompt;
  t[0] = task;
  return t;
}

inline std::array<int, kPromptLength> scene_text() { return {vocab::task_scene, vocab::pad, vocab::pad, vocab::pad}; }

template <class T>
struct Batch {
  int groups = 0;
  ag::Mat<T> scene, layout, human;
  std::vector<int> text_layout, text_human, text_scene;
};

template <class T>
Batch<T> make_batch(const std::vector<const EncodedSample*>& samples) {
  if (samples.empty()) throw ShapeError("empty batch");
  Batch<T> b;
  b.groups = static_cast<int>(samples.size());
  const Eigen::Index n = samples[0]->scene.rows(), d = samples[0]->scene.cols();
  b.scene.resize(n * b.groups, d);
  b.layout.resize(n * b.groups, d);
  b.human.resize(n * b.groups, d);
  for (int g = 0; g < b.groups; ++g) {
    const EncodedSample& s = *samples[static_cast<std::size_t>(g)];
    b.scene.middleRows(g * n, n) = s.scene.cast<T>();
    b.layout.middleRows(g * n, n) = s.layout.cast<T>();
    b.human.middleRows(g * n, n) = s.human.cast<T>();
    for (int id : task_text(vocab::task_layout, s.prompt)) b.text_layout.push_back(id);
    for (int id : task_text(vocab::task_human, s.prompt)) b.text_human.push_back(id);
    for (int id : scene_text()) b.text_scene.push_back(id);
  }
  return b;
}

/// Random draws of one step. The main path serves the phase's primary loss;
/// the render draws feed only the joint phase, from a separate stream.
template <class T>
struct FlowNoise {
  ag::Mat<T> x0;
  std::vector<T> t;
  ag::Mat<T> m0;
  ag::Mat<T> x0_render;
  std::vector<T> t_render;
};

template <class T>
ag::Mat<T> normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  ag::Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal());
  return m;
}

template <class T>
FlowNoise<T> draw_noise(Rng& main, Rng& render, int groups, Eigen::Index tokens, Eigen::Index target_dim,
                        Eigen::Index latent_dim, bool with_render) {
  FlowNoise<T> nz;
  nz.x0 = normal_matrix<T>(main, groups * tokens, target_dim);
  for (int g = 0; g < groups; ++g) nz.t.push_back(static_cast<T>(main.uniform()));
  if (with_render) {
    nz.m0 = normal_matrix<T>(render, groups * tokens, latent_dim);
    nz.x0_render = normal_matrix<T>(render, groups * tokens, latent_dim);
    for (int g = 0; g < groups; ++g) nz.t_render.push_back(static_cast<T>(render.uniform()));
  }
  return nz;
}

template <class T>
struct LossTerms {
  ag::Var<T> reason, render, total;
};

namespace detail {

/// Flow-matching loss for target x1 from noise x0 at per-group times t.
template <class T>
ag::Var<T> flow_term(const Backbone<T>& model, const ag::Mat<T>& x1, const ag::Mat<T>& x0, const std::vector<T>& t,
                     const ag::Var<T>& cond, const std::vector<int>& text, Adapter adapter) {
  const int groups = static_cast<int>(t.size());
  const Eigen::Index n = x1.rows() / groups;
  ag::Mat<T> xt(x1.rows(), x1.cols());
  for (int g = 0; g < groups; ++g)
    xt.middleRows(g * n, n) = (T(1) - t[static_cast<std::size_t>(g)]) * x0.middleRows(g * n, n) +
                              t[static_cast<std::size_t>(g)] * x1.middleRows(g * n, n);
  const ag::Var<T> v = model.forward(ag::constant<T>(std::move(xt)), t, cond, text, adapter);
  return fm_loss(v, ag::constant<T>(x1 - x0));
}

template <class T>
ag::Mat<T> implicit_target(const Batch<T>& b) {
  ag::Mat<T> out(b.human.rows(), b.human.cols() + b.layout.cols());
  out << b.human, b.layout;
  return out;
}

}  // namespace detail

/// Differentiable loss of one step for any phase.
template <class T>
LossTerms<T> phase_loss(const Backbone<T>& model, const PhaseConfig& cfg, const Batch<T>& b, const FlowNoise<T>& nz,
                        PretrainTask task = PretrainTask::layout) {
  LossTerms<T> out;
  const ag::Var<T> none;
  switch (cfg.phase) {
    case Phase::pretrain:
      if (task == PretrainTask::layout)
        out.total = detail::flow_term(model, b.layout, nz.x0, nz.t, none, b.text_layout, Adapter::none);
      else if (task == PretrainTask::human)
        out.total = detail::flow_term(model, b.human, nz.x0, nz.t, none, b.text_human, Adapter::none);
      else
        out.total =
            detail::flow_term(model, b.scene, nz.x0, nz.t, ag::constant<T>(b.scene), b.text_scene, Adapter::none);
      break;
    case Phase::reason:
      out.reason = detail::flow_term(model, b.layout, nz.x0, nz.t, ag::constant<T>(b.scene), b.text_layout,
                                     Adapter::skeletal);
      out.total = out.reason;
      break;
    case Phase::joint: {
      const ag::Var<T> scene = ag::constant<T>(b.scene);
      out.reason = detail::flow_term(model, b.layout, nz.x0, nz.t, scene, b.text_layout, Adapter::skeletal);
      const GraphField<T> reasoner = [&](const ag::Var<T>& x, const std::vector<T>& t) {
        return model.forward(x, t, scene, b.text_layout, Adapter::skeletal);
      };
      const ag::Var<T> m_hat = derive_onestep<T>(ag::constant<T>(nz.m0), b.groups, reasoner);
      out.render = detail::flow_term(model, b.human, nz.x0_render, nz.t_render, m_hat, b.text_human, Adapter::appearance);
      out.total = ag::add(ag::scale(out.reason, static_cast<T>(cfg.lambda_reason)),
                          ag::scale(out.render, static_cast<T>(cfg.lambda_render)));
      break;
    }
    case Phase::finetune:
      out.render = detail::flow_term(model, b.human, nz.x0, nz.t, ag::constant<T>(b.layout), b.text_human,
                                     Adapter::appearance);
      out.total = out.render;
      break;
    case Phase::single_stage:
      out.render = detail::flow_term(model, b.human, nz.x0, nz.t, ag::constant<T>(b.scene), b.text_human,
                                     Adapter::appearance);
      out.total = out.render;
      break;
    case Phase::implicit:
      out.render = detail::flow_term(model, detail::implicit_target(b), nz.x0, nz.t, ag::constant<T>(b.scene),
                                     b.text_human, Adapter::appearance);
      out.total = out.render;
      break;
  }
  return out;
}

inline constexpr std::array<const char*, 4> kImplicitIoParams = {"noise/in_w", "noise/in_b", "final/out_w",
                                                                 "final/out_b"};

/// Backbone whose noise stream carries image and layout tokens side by side.
/// Input weights are halved and duplicated, output weights duplicated, so both
/// halves start from the pretrained prediction.
inline Backbone<float> widen_for_implicit(const Backbone<float>& base) {
  ModelConfig c = base.config();
  const int p = c.noise_patch_dim;
  c.noise_patch_dim = 2 * p;
  Backbone<float> out(c);
  for (const auto& [name, v] : base.params()) {
    const ag::Mat<float>& w = v.value();
    ag::Mat<float>& dst = out.param(name).mutable_value();
    if (name == "noise/in_w") {
      dst << 0.5f * w, 0.5f * w;
    } else if (name == "final/out_w") {
      dst << w, w;
    } else if (name == "final/out_b") {
      dst << w, w;
    } else {
      dst = w;
    }
  }
  out.set_active_adapter(Adapter::appearance);
  return out;
}

inline std::vector<std::string> trainable_params(const Backbone<float>& model, const PhaseConfig& cfg) {
  std::vector<std::string> names;
  switch (cfg.trainable) {
    case Trainable::backbone: names = model.backbone_params(); break;
    case Trainable::skeletal: names = model.adapter_params(Adapter::skeletal); break;
    case Trainable::appearance: names = model.adapter_params(Adapter::appearance); break;
    case Trainable::skeletal_appearance:
      names = model.adapter_params(Adapter::skeletal);
      for (auto& n : model.adapter_params(Adapter::appearance)) names.push_back(n);
      break;
  }
  if (cfg.phase == Phase::implicit)
    for (const char* n : kImplicitIoParams) names.emplace_back(n);
  return names;
}

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// One Adam update with bias correction; `step` counts from 1.
inline void adam_update(ag::Mat<float>& p, const ag::Mat<float>& g, ag::Mat<float>& m, ag::Mat<float>& v, double lr,
                        std::uint64_t step, const AdamConfig& a = {}) {
  const float b1 = static_cast<float>(a.beta1), b2 = static_cast<float>(a.beta2);
  m = b1 * m + (1.0f - b1) * g;
  v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(step));
  const float step_size = static_cast<float>(lr / c1);
  const float inv_c2 = static_cast<float>(1.0 / std::sqrt(c2));
  const float eps = static_cast<float>(a.eps);
  p.array() -= step_size * m.array() / (v.array().sqrt() * inv_c2 + eps);
}

namespace detail {

inline Eigen::Index target_dim(const Backbone<float>& model) { return model.config().noise_patch_dim; }

inline double loss_value(const ag::Var<float>& v) { return v ? static_cast<double>(v.item()) : 0.0; }

}  // namespace detail

/// Mean phase loss over a fixed held-out subset with fixed noise.
inline double heldout_loss(const Backbone<float>& model, const PhaseConfig& cfg, const TrainingSet& data) {
  const std::size_t count = std::min(data.holdout.size(), static_cast<std::size_t>(cfg.heldout_count));
  if (count == 0) return 0.0;
  ag::NoGradGuard guard;
  ag::FlushDenormals ftz;
  Rng main(Rng::derive(cfg.seed, 0xE7A1)), render(Rng::derive(cfg.seed, 0xE7A2));
  const std::vector<PretrainTask> tasks = cfg.phase == Phase::pretrain
                                              ? std::vector<PretrainTask>{PretrainTask::layout, PretrainTask::human,
                                                                          PretrainTask::scene}
                                              : std::vector<PretrainTask>{PretrainTask::layout};
  double sum = 0.0;
  std::size_t weight = 0;
  for (std::size_t start = 0; start < count; start += static_cast<std::size_t>(cfg.batch_size)) {
    std::vector<const EncodedSample*> ptrs;
    for (std::size_t i = start; i < std::min(count, start + static_cast<std::size_t>(cfg.batch_size)); ++i)
      ptrs.push_back(&data.holdout[i]);
    const Batch<float> b = make_batch<float>(ptrs);
    for (PretrainTask task : tasks) {
      const auto nz = draw_noise<float>(main, render, b.groups, b.scene.rows() / b.groups, detail::target_dim(model),
                                        b.scene.cols(), cfg.phase == Phase::joint);
      sum += detail::loss_value(phase_loss(model, cfg, b, nz, task).total) * static_cast<double>(b.groups);
      weight += static_cast<std::size_t>(b.groups);
    }
  }
  return sum / static_cast<double>(weight);
}

struct StepLosses {
  std::int64_t step = 0;
  double reason = 0.0, render = 0.0, total = 0.0;
};

using ProgressFn = std::function<void(const StepLosses&)>;

inline Checkpoint initial_checkpoint(const ModelConfig& config) { return {Backbone<float>(config), TrainState{}}; }

/// Runs or resumes one curriculum phase and returns the resulting checkpoint.
/// The input checkpoint is not modified.
inline Checkpoint run_phase(const TrainingSet& data, const Checkpoint& in, const PhaseConfig& cfg,
                            const ProgressFn& progress = {}) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("training split is empty");
  Backbone<float> model = in.model.clone();
  const ModelConfig& mc = model.config();
  if (cfg.phase == Phase::implicit && mc.noise_patch_dim == mc.cond_patch_dim) model = widen_for_implicit(model);
  if (cfg.phase != Phase::implicit && model.config().noise_patch_dim != model.config().cond_patch_dim)
    throw ConfigError("phase " + std::string(to_string(cfg.phase)) + " needs a model with a plain noise stream");
  if (cfg.phase == Phase::implicit && model.config().noise_patch_dim != 2 * model.config().cond_patch_dim)
    throw ConfigError("implicit phase needs a widened noise stream");
  if (data.train.front().scene.cols() != model.config().cond_patch_dim ||
      data.train.front().scene.rows() != model.config().grid_tokens())
    throw ShapeError("dataset latents do not match the model");

  const std::string label(to_string(cfg.phase));
  const std::vector<std::string> names = trainable_params(model, cfg);
  TrainState state;
  // same phase and identity: continue from the stored step, moments and rng
  const bool resume = in.state.phase == label && in.state.config_hash == cfg.hash() && in.state.step > 0 &&
                      !in.state.log.empty();
  if (resume) {
    state = in.state;
    state.log.back().erase("heldout_end");
  } else {
    state.phase = label;
    state.config_hash = cfg.hash();
    state.rng_state = Rng(Rng::derive(cfg.seed, 0x7EA1)).serialize();
    state.log = in.state.log;
    for (const auto& n : names) {
      state.adam_m[n] = ag::Mat<float>::Zero(model.param(n).rows(), model.param(n).cols());
      state.adam_v[n] = state.adam_m[n];
    }
    state.log.push_back({{"phase", label},
                         {"config", cfg.to_json()},
                         {"heldout_start", heldout_loss(model, cfg, data)},
                         {"windows", nlohmann::json::array()}});
  }
  Rng master;
  master.deserialize(state.rng_state);
  model.set_trainable(names);
  ag::FlushDenormals ftz;

  const int n_tokens = model.config().grid_tokens();
  StepLosses window;
  int window_count = 0;
  for (auto step = static_cast<std::int64_t>(state.step); step < cfg.steps; ++step) {
    const std::uint64_t step_seed = master.next_u64();
    Rng batch_rng(Rng::derive(step_seed, 1)), main_rng(Rng::derive(step_seed, 2)), render_rng(Rng::derive(step_seed, 3));
    std::vector<const EncodedSample*> ptrs;
    for (int i = 0; i < cfg.batch_size; ++i)
      ptrs.push_back(&data.train[static_cast<std::size_t>(
          batch_rng.uniform_int(0, static_cast<std::int64_t>(data.train.size()) - 1))]);
    const auto task = static_cast<PretrainTask>(batch_rng.uniform_int(0, 2));
    const Batch<float> b = make_batch<float>(ptrs);
    const auto nz = draw_noise<float>(main_rng, render_rng, b.groups, n_tokens, detail::target_dim(model),
                                      b.scene.cols(), cfg.phase == Phase::joint);
    const LossTerms<float> loss = phase_loss(model, cfg, b, nz, task);
    const StepLosses now{step, detail::loss_value(loss.reason), detail::loss_value(loss.render),
                         detail::loss_value(loss.total)};
    if (!std::isfinite(now.total)) throw NumericalError(step, "non-finite training loss");
    ag::backward(loss.total);
    for (const auto& n : names) {
      ag::Var<float>& p = model.param(n);
      adam_update(p.mutable_value(), p.grad(), state.adam_m.at(n), state.adam_v.at(n), cfg.lr,
                  static_cast<std::uint64_t>(step) + 1);
    }
    model.zero_grad();
    state.step = static_cast<std::uint64_t>(step) + 1;
    window.reason += now.reason;
    window.render += now.render;
    window.total += now.total;
    ++window_count;
    if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
      state.avg_reason = window.reason / window_count;
      state.avg_render = window.render / window_count;
      state.avg_total = window.total / window_count;
      state.log.back()["windows"].push_back(
          {{"step", step + 1}, {"reason", state.avg_reason}, {"render", state.avg_render}, {"total", state.avg_total}});
      window = {};
      window_count = 0;
    }
    if (progress) progress(now);
  }
  model.set_trainable({});
  state.rng_state = master.serialize();
  state.log.back()["heldout_end"] = heldout_loss(model, cfg, data);
  return {std::move(model), std::move(state)};
}

/// Held-out loss at the start and end of the most recent phase in a log.
inline std::pair<double, double> heldout_delta(const TrainState& state) {
  if (state.log.empty() || !state.log.back().contains("heldout_end")) throw ConfigError("no completed phase in log");
  return {state.log.back().at("heldout_start").get<double>(), state.log.back().at("heldout_end").get<double>()};
}

}  // namespace skeleguide
