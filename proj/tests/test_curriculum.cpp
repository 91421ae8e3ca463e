#include <gtest/gtest.h>

#include <filesystem>

#include "skeleguide/checkpoint.hpp"
#include "skeleguide/curriculum.hpp"
#include "test_support.hpp"

using namespace skeleguide;
using namespace skeleguide::testing;

namespace {

ModelConfig small_config(std::uint64_t seed = 3) {
  ModelConfig c = tiny_config(seed);
  c.image_size = 64;
  return c;
}

const TrainingSet& world() {
  static const TrainingSet set = [] {
    Dataset ds;
    ds.samples = make_world(40, 77);
    return encode_dataset(ds);
  }();
  return set;
}

/// Randomized backbone standing in for a pretrained one, so every path carries signal.
Checkpoint pretrained(std::uint64_t seed = 3) {
  Checkpoint ck = initial_checkpoint(small_config(seed));
  randomize(ck.model, seed + 100);
  return ck;
}

std::uint64_t hash_of(const Backbone<float>& m, const std::vector<std::string>& names) { return hash_params(m, names); }

std::vector<std::string> skeletal(const Backbone<float>& m) { return m.adapter_params(Adapter::skeletal); }
std::vector<std::string> appearance(const Backbone<float>& m) { return m.adapter_params(Adapter::appearance); }

PhaseConfig quick(Phase p, std::int64_t steps, std::uint64_t seed = 5) {
  PhaseConfig c = PhaseConfig::for_phase(p, steps, seed);
  c.batch_size = 2;
  c.heldout_count = 4;
  c.log_every = 2;
  c.lr = 1e-3;
  return c;
}

template <class T>
struct StepInputs {
  Batch<T> batch;
  FlowNoise<T> noise;
};

template <class T>
StepInputs<T> step_inputs(const ModelConfig& c, bool joint, std::uint64_t seed = 9) {
  const auto& set = world();
  StepInputs<T> in;
  in.batch = make_batch<T>({&set.train[0], &set.train[1]});
  Rng main(seed), render(seed + 1);
  in.noise = draw_noise<T>(main, render, 2, c.grid_tokens(), c.noise_patch_dim, c.cond_patch_dim, joint);
  return in;
}

}  // namespace

TEST(PhaseConfig, DefaultsFollowThePhaseTable) {
  const auto joint = PhaseConfig::for_phase(Phase::joint);
  EXPECT_EQ(joint.lambda_reason, 0.5);
  EXPECT_EQ(joint.lambda_render, 1.0);
  EXPECT_EQ(joint.lr, 1e-4);
  EXPECT_EQ(joint.batch_size, 8);
  EXPECT_EQ(joint.trainable, Trainable::skeletal_appearance);
  EXPECT_EQ(joint.conditioning, CondSource::online_derived);
  EXPECT_EQ(PhaseConfig::for_phase(Phase::reason).trainable, Trainable::skeletal);
  EXPECT_EQ(PhaseConfig::for_phase(Phase::finetune).trainable, Trainable::appearance);
  EXPECT_EQ(PhaseConfig::for_phase(Phase::finetune).conditioning, CondSource::ground_truth);
  for (Phase p : {Phase::pretrain, Phase::reason, Phase::joint, Phase::finetune, Phase::single_stage, Phase::implicit}) {
    EXPECT_NO_THROW(PhaseConfig::for_phase(p).validate());
    EXPECT_EQ(parse_phase(to_string(p)), p);
  }
  EXPECT_THROW(parse_phase("4"), ConfigError);
}

TEST(PhaseConfig, InvariantsAreEnforced) {
  auto c = PhaseConfig::for_phase(Phase::reason);
  c.trainable = Trainable::skeletal_appearance;
  EXPECT_THROW(c.validate(), ConfigError);
  c = PhaseConfig::for_phase(Phase::finetune);
  c.conditioning = CondSource::online_derived;
  EXPECT_THROW(c.validate(), ConfigError);
  c = PhaseConfig::for_phase(Phase::finetune);
  c.trainable = Trainable::skeletal_appearance;
  EXPECT_THROW(c.validate(), ConfigError);
  c = PhaseConfig::for_phase(Phase::joint);
  c.conditioning = CondSource::ground_truth;
  EXPECT_THROW(c.validate(), ConfigError);
  c = PhaseConfig::for_phase(Phase::joint);
  c.lambda_render = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = PhaseConfig::for_phase(Phase::joint);
  c.lambda_reason = std::nan("");
  EXPECT_THROW(c.validate(), ConfigError);
  c = PhaseConfig::for_phase(Phase::single_stage);
  c.trainable = Trainable::backbone;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(PhaseConfig, HashIgnoresStepBudgetOnly) {
  const auto a = PhaseConfig::for_phase(Phase::joint, 10, 1);
  auto b = a;
  b.steps = 20;
  EXPECT_EQ(a.hash(), b.hash());
  b.seed = 2;
  EXPECT_NE(a.hash(), b.hash());
  b = a;
  b.lambda_render = 0.9;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Checkpoint, RoundtripIsBitwise) {
  Checkpoint ck = run_phase(world(), pretrained(), quick(Phase::joint, 2));
  const auto path = std::filesystem::temp_directory_path() / "skg_roundtrip.skgd";
  save_checkpoint(ck.model, ck.state, path.string());
  const Checkpoint back = load_checkpoint(path.string());
  EXPECT_EQ(back.model.config(), ck.model.config());
  for (const auto& [name, v] : ck.model.params()) EXPECT_EQ(back.model.param(name).value(), v.value()) << name;
  EXPECT_TRUE(back.state == ck.state);
  EXPECT_EQ(encode_checkpoint(checkpoint_entries(back.model, back.state)), read_bytes(path.string()));
  std::filesystem::remove(path);
}

TEST(Checkpoint, EntryLayoutMatchesDocumentedFormat) {
  ag::Mat<float> m(2, 3);
  m << 1, 2, 3, 4, 5, 6;
  const auto bytes = encode_checkpoint({matrix_entry("w", m)});
  ASSERT_EQ(bytes.size(), 4u + 4 + 8 + 2 + 1 + 1 + 16 + 1 + 24);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SKGD");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[8], 1);  // entry count
  EXPECT_EQ(bytes[16], 1);  // name length
  EXPECT_EQ(bytes[18], 'w');
  EXPECT_EQ(bytes[19], 2);  // rank
  EXPECT_EQ(bytes[20], 2);
  EXPECT_EQ(bytes[28], 3);
  EXPECT_EQ(bytes[36], 0);  // float32
  float first;
  std::memcpy(&first, &bytes[37], 4);
  EXPECT_EQ(first, 1.0f);
  const auto entries = decode_checkpoint(bytes);
  ASSERT_EQ(entries.size(), 1u);
  EXPECT_EQ(entry_matrix(entries[0]), m);
}

TEST(Checkpoint, TruncationIsReportedAtEveryCut) {
  const Checkpoint ck = initial_checkpoint(tiny_config());
  const auto bytes = encode_checkpoint(checkpoint_entries(ck.model, ck.state));
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, std::size_t{17}, bytes.size() / 2,
                          bytes.size() - 1}) {
    const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    try {
      decode_checkpoint(part);
      FAIL() << "cut " << cut << " accepted";
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
    }
  }
}

TEST(Checkpoint, TruncatedFileLeavesCallerStateUntouched) {
  const auto path = std::filesystem::temp_directory_path() / "skg_trunc.skgd";
  Checkpoint ck = initial_checkpoint(tiny_config());
  save_checkpoint(ck.model, ck.state, path.string());
  auto bytes = read_bytes(path.string());
  bytes.resize(bytes.size() - 7);
  write_bytes(path.string(), bytes);
  Checkpoint holder = initial_checkpoint(tiny_config(9));
  const auto before = hash_of(holder.model, holder.model.backbone_params());
  EXPECT_THROW(holder = load_checkpoint(path.string()), FormatError);
  EXPECT_EQ(hash_of(holder.model, holder.model.backbone_params()), before);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ForeignMagicVersionAndTrailingBytes) {
  const Checkpoint ck = initial_checkpoint(tiny_config());
  auto bytes = encode_checkpoint(checkpoint_entries(ck.model, ck.state));
  auto bad = bytes;
  bad[0] = 'P';
  try {
    decode_checkpoint(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 'SKGD'"), std::string::npos);
  }
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  auto entries = checkpoint_entries(ck.model, ck.state);
  entries.pop_back();
  EXPECT_THROW(checkpoint_from_entries(entries), FormatError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ck.skgd"), IoError);
}

TEST(Curriculum, ZeroStepsReturnInitialization) {
  const Checkpoint init = initial_checkpoint(small_config());
  const Checkpoint out = run_phase(world(), init, quick(Phase::pretrain, 0));
  EXPECT_EQ(hash_of(out.model, out.model.backbone_params()), hash_of(init.model, init.model.backbone_params()));
  EXPECT_EQ(out.state.step, 0u);
}

TEST(Curriculum, PretrainIsDeterministic) {
  const Checkpoint init = initial_checkpoint(small_config());
  const Checkpoint a = run_phase(world(), init, quick(Phase::pretrain, 4));
  const Checkpoint b = run_phase(world(), init, quick(Phase::pretrain, 4));
  EXPECT_EQ(encode_checkpoint(checkpoint_entries(a.model, a.state)),
            encode_checkpoint(checkpoint_entries(b.model, b.state)));
  const Checkpoint c = run_phase(world(), init, quick(Phase::pretrain, 4, 6));
  EXPECT_NE(hash_of(a.model, a.model.backbone_params()), hash_of(c.model, c.model.backbone_params()));
  // input checkpoint is not mutated
  EXPECT_EQ(hash_of(init.model, init.model.backbone_params()),
            hash_of(initial_checkpoint(small_config()).model, init.model.backbone_params()));
}

TEST(Curriculum, PretrainTouchesOnlyTheBackbone) {
  const Checkpoint init = initial_checkpoint(small_config());
  const Checkpoint out = run_phase(world(), init, quick(Phase::pretrain, 3));
  EXPECT_NE(hash_of(out.model, out.model.backbone_params()), hash_of(init.model, init.model.backbone_params()));
  EXPECT_EQ(hash_of(out.model, skeletal(out.model)), hash_of(init.model, skeletal(init.model)));
  EXPECT_EQ(hash_of(out.model, appearance(out.model)), hash_of(init.model, appearance(init.model)));
}

TEST(Curriculum, PretrainLossDecreasesOnHeldOut) {
  auto cfg = quick(Phase::pretrain, 60);
  cfg.lr = 3e-3;
  cfg.batch_size = 4;
  cfg.heldout_count = 4;
  const Checkpoint out = run_phase(world(), initial_checkpoint(small_config()), cfg);
  const auto [start, end] = heldout_delta(out.state);
  EXPECT_LT(end, start);
  const auto& windows = out.state.log.back().at("windows");
  EXPECT_LT(windows.back().at("total").get<double>(), windows.front().at("total").get<double>());
}

TEST(Curriculum, Phase1MutatesOnlySkeletal) {
  const Checkpoint init = pretrained();
  const Checkpoint out = run_phase(world(), init, quick(Phase::reason, 10));
  EXPECT_EQ(hash_of(out.model, out.model.backbone_params()), hash_of(init.model, init.model.backbone_params()));
  EXPECT_EQ(hash_of(out.model, appearance(out.model)), hash_of(init.model, appearance(init.model)));
  EXPECT_NE(hash_of(out.model, skeletal(out.model)), hash_of(init.model, skeletal(init.model)));
  for (const auto& [name, v] : out.model.params()) EXPECT_FALSE(v.requires_grad()) << name;
}

TEST(Curriculum, ZeroLearningRateChangesNothing) {
  const Checkpoint init = pretrained();
  for (Phase p : {Phase::pretrain, Phase::reason, Phase::joint}) {
    auto cfg = quick(p, 3);
    cfg.lr = 0.0;
    const Checkpoint out = run_phase(world(), init, cfg);
    for (const auto& [name, v] : out.model.params()) EXPECT_EQ(v.value(), init.model.param(name).value()) << name;
  }
}

TEST(Curriculum, Phase3MutatesOnlyAppearanceAndZeroesSkeletalGradient) {
  const Checkpoint init = pretrained();
  const Checkpoint out = run_phase(world(), init, quick(Phase::finetune, 5));
  EXPECT_EQ(hash_of(out.model, out.model.backbone_params()), hash_of(init.model, init.model.backbone_params()));
  EXPECT_EQ(hash_of(out.model, skeletal(out.model)), hash_of(init.model, skeletal(init.model)));
  EXPECT_NE(hash_of(out.model, appearance(out.model)), hash_of(init.model, appearance(init.model)));

  Backbone<float> model = init.model.clone();
  model.set_trainable(skeletal(model));
  const auto in = step_inputs<float>(model.config(), false);
  const auto loss = phase_loss(model, PhaseConfig::for_phase(Phase::finetune), in.batch, in.noise);
  ag::backward(loss.total);
  for (const auto& n : skeletal(model)) EXPECT_TRUE(model.param(n).grad().isZero(0.0)) << n;
}

TEST(Curriculum, Phase2RenderGradientReachesSkeletal) {
  Backbone<float> model = pretrained().model;
  auto cfg = PhaseConfig::for_phase(Phase::joint);
  cfg.lambda_reason = 0.0;
  model.set_trainable(skeletal(model));
  const auto in = step_inputs<float>(model.config(), true);
  ag::backward(phase_loss(model, cfg, in.batch, in.noise).total);
  double norm = 0.0;
  for (const auto& n : skeletal(model))
    if (n.back() == 'B') norm += model.param(n).grad().squaredNorm();
  EXPECT_GT(norm, 0.0);
}

TEST(Curriculum, Phase2WithoutRenderMatchesPhase1) {
  const Checkpoint init = pretrained();
  Backbone<float> model = init.model.clone();
  auto cfg = quick(Phase::joint, 4);
  cfg.lambda_render = 0.0;
  cfg.lambda_reason = 1.0;
  model.set_trainable(appearance(model));
  const auto in = step_inputs<float>(model.config(), true);
  ag::backward(phase_loss(model, cfg, in.batch, in.noise).total);
  for (const auto& n : appearance(model)) EXPECT_TRUE(model.param(n).grad().isZero(0.0)) << n;

  const Checkpoint joint = run_phase(world(), init, cfg);
  const Checkpoint reason = run_phase(world(), init, quick(Phase::reason, 4));
  for (const auto& n : skeletal(init.model)) EXPECT_EQ(joint.model.param(n).value(), reason.model.param(n).value()) << n;
  EXPECT_EQ(hash_of(joint.model, appearance(joint.model)), hash_of(init.model, appearance(init.model)));
}

TEST(Curriculum, Phase2WithoutReasonStillMovesSkeletal) {
  const Checkpoint init = pretrained();
  auto cfg = quick(Phase::joint, 1);
  cfg.lambda_reason = 0.0;
  const Checkpoint out = run_phase(world(), init, cfg);
  EXPECT_NE(hash_of(out.model, skeletal(out.model)), hash_of(init.model, skeletal(init.model)));
  EXPECT_NE(hash_of(out.model, appearance(out.model)), hash_of(init.model, appearance(init.model)));
  EXPECT_EQ(hash_of(out.model, out.model.backbone_params()), hash_of(init.model, init.model.backbone_params()));
}

TEST(Curriculum, TotalLossIsLinearInLambdas) {
  const Backbone<float> model = pretrained().model;
  const auto in = step_inputs<float>(model.config(), true);
  auto cfg = PhaseConfig::for_phase(Phase::joint);
  ag::NoGradGuard guard;
  const auto one = phase_loss(model, cfg, in.batch, in.noise);
  cfg.lambda_reason *= 2;
  cfg.lambda_render *= 2;
  const auto two = phase_loss(model, cfg, in.batch, in.noise);
  EXPECT_EQ(two.total.item(), 2.0f * one.total.item());
  EXPECT_EQ(one.total.item(), 0.5f * one.reason.item() + one.render.item());
}

TEST(Curriculum, Phase2TotalLossGradcheckDouble) {
  ModelConfig c = small_config();
  c.n_blocks = 2;
  Backbone<float> base(c);
  randomize(base, 103);
  Backbone<double> model = base.cast<double>();
  Rng rng(4);
  for (const auto& n : model.adapter_params(Adapter::skeletal))
    if (n.back() == 'B') model.param(n).mutable_value() = random_tokens<double>(rng, model.param(n).rows(), model.param(n).cols()) * 0.05;
  const auto in = step_inputs<double>(model.config(), true);
  const auto cfg = PhaseConfig::for_phase(Phase::joint);
  std::vector<std::pair<std::string, ag::Var<double>>> params;
  for (const auto& n : model.adapter_params(Adapter::skeletal))
    if (n.back() == 'B') params.emplace_back(n, model.param(n));
  const auto report = gradcheck<double>([&] { return phase_loss(model, cfg, in.batch, in.noise).total; }, params,
                                        {1e-5, 8, 1e-6, 2});
  EXPECT_TRUE(report.passed(1e-4)) << report.max_rel_error;
  for (const auto& e : report.entries) {
    // condition-branch queries of the last block do not reach the output
    if (e.name.find("blk1/q/") == std::string::npos) {
      EXPECT_GT(e.max_abs_analytic, 0.0) << e.name;
    }
  }
}

TEST(Curriculum, ResumeReproducesUninterruptedRun) {
  const Checkpoint init = pretrained();
  const Checkpoint full = run_phase(world(), init, quick(Phase::joint, 6));
  const Checkpoint half = run_phase(world(), init, quick(Phase::joint, 3));
  const auto path = std::filesystem::temp_directory_path() / "skg_resume.skgd";
  save_checkpoint(half.model, half.state, path.string());
  const Checkpoint resumed = run_phase(world(), load_checkpoint(path.string()), quick(Phase::joint, 6));
  for (const auto& [name, v] : full.model.params()) EXPECT_EQ(resumed.model.param(name).value(), v.value()) << name;
  EXPECT_EQ(resumed.state.adam_m, full.state.adam_m);
  EXPECT_EQ(resumed.state.rng_state, full.state.rng_state);
  EXPECT_EQ(resumed.state.step, 6u);
  std::filesystem::remove(path);
}

TEST(Curriculum, BaselinesTrainOneAdapterSet) {
  const Checkpoint init = pretrained();
  const Checkpoint single = run_phase(world(), init, quick(Phase::single_stage, 2));
  EXPECT_EQ(single.state.phase, "single");
  EXPECT_EQ(hash_of(single.model, single.model.backbone_params()), hash_of(init.model, init.model.backbone_params()));
  EXPECT_EQ(hash_of(single.model, skeletal(single.model)), hash_of(init.model, skeletal(init.model)));
  EXPECT_NE(hash_of(single.model, appearance(single.model)), hash_of(init.model, appearance(init.model)));
}

TEST(Curriculum, ImplicitBaselineDoublesTheNoiseStream) {
  const Checkpoint init = pretrained();
  const Backbone<float> wide = widen_for_implicit(init.model);
  const auto& c = init.model.config();
  EXPECT_EQ(wide.config().noise_patch_dim, 2 * c.noise_patch_dim);
  EXPECT_EQ(wide.param("final/out_w").rows(), 2 * c.noise_patch_dim);
  EXPECT_EQ(wide.param("noise/in_w").cols(), 2 * c.noise_patch_dim);

  // the widened input map of [x | x] equals the base map of x, and both output halves agree
  Rng rng(1);
  const ag::Mat<float> x = random_tokens<float>(rng, c.grid_tokens(), c.noise_patch_dim);
  ag::Mat<float> xx(x.rows(), 2 * x.cols());
  xx << x, x;
  const ag::Mat<float> cond = random_tokens<float>(rng, c.grid_tokens(), c.cond_patch_dim);
  const std::vector<int> text{vocab::task_human, vocab::standing, vocab::center, vocab::one};
  ag::NoGradGuard guard;
  const auto base = init.model.forward(ag::constant(x), {0.3f}, ag::constant(cond), text, Adapter::appearance).value();
  const auto both = wide.forward(ag::constant(xx), {0.3f}, ag::constant(cond), text, Adapter::appearance).value();
  EXPECT_LT((both.leftCols(x.cols()) - base).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_EQ(both.leftCols(x.cols()), both.rightCols(x.cols()));

  const Checkpoint out = run_phase(world(), init, quick(Phase::implicit, 2));
  EXPECT_EQ(out.model.config().noise_patch_dim, 2 * c.noise_patch_dim);
  for (const auto& name : init.model.backbone_params()) {
    const bool io = std::find(kImplicitIoParams.begin(), kImplicitIoParams.end(), name) != kImplicitIoParams.end();
    if (!io) {
      EXPECT_EQ(out.model.param(name).value(), init.model.param(name).value()) << name;
    }
  }
  EXPECT_EQ(hash_of(out.model, skeletal(out.model)), hash_of(init.model, skeletal(init.model)));
  EXPECT_THROW(run_phase(world(), out, quick(Phase::reason, 1)), ConfigError);
}

TEST(Curriculum, DivergenceAbortsWithStep) {
  auto cfg = quick(Phase::pretrain, 40);
  cfg.lr = 1e30;
  try {
    run_phase(world(), initial_checkpoint(small_config()), cfg);
    FAIL() << "no divergence detected";
  } catch (const NumericalError& e) {
    EXPECT_GT(e.step, 0);
  }
}

TEST(Curriculum, EmptyTrainingSplitIsRejected) {
  TrainingSet empty;
  EXPECT_THROW(run_phase(empty, initial_checkpoint(small_config()), quick(Phase::pretrain, 1)), ConfigError);
}
