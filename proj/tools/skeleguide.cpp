#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "skeleguide/checkpoint.hpp"
#include "skeleguide/curriculum.hpp"
#include "skeleguide/dataset.hpp"
#include "skeleguide/diagnostics.hpp"
#include "skeleguide/keypoints.hpp"
#include "skeleguide/metrics.hpp"
#include "skeleguide/pipeline.hpp"
#include "skeleguide/service.hpp"

using namespace skeleguide;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << text;
  if (!out) throw IoError(path, "write failed");
}

std::string read_text(const std::string& path) {
  const auto bytes = read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

struct PromptArgs {
  std::string action = "standing", location = "center";
  int count = 1;

  PromptSpec spec() const {
    const auto a = parse_action(action);
    const auto l = parse_location(location);
    if (!a) throw ConfigError("unknown action '" + action + "'");
    if (!l) throw ConfigError("unknown location '" + location + "'");
    return make_prompt(*a, *l, count);
  }
};

void add_prompt_options(CLI::App* cmd, PromptArgs& p) {
  cmd->add_option("--action", p.action, "standing | sitting");
  cmd->add_option("--location", p.location, "left | center | right");
  cmd->add_option("--count", p.count, "persons, 1 or 2");
}

Image scene_from_args(const std::string& scene_path, std::optional<std::uint64_t> scene_seed, int size) {
  if (!scene_path.empty()) return read_png(scene_path);
  if (!scene_seed) throw ConfigError("give --scene or --scene-seed");
  WorldConfig wc;
  wc.width = wc.height = size;
  return sample_scene(*scene_seed, wc).image;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"skeleguide: reason-then-render human-in-place synthesis on a synthetic stick-figure world"};
  app.require_subcommand(1);

  // gen-data
  std::string gd_out;
  std::size_t gd_count = 2000;
  std::uint64_t gd_seed = 0;
  int gd_size = 64;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
  gen->add_option("--out", gd_out, "output directory")->required();
  gen->add_option("--count", gd_count, "number of samples");
  gen->add_option("--seed", gd_seed, "world seed");
  gen->add_option("--size", gd_size, "image side length");

  // invert
  std::string inv_layout, inv_out;
  auto* inv = app.add_subcommand("invert", "Decode a layout PNG into a keypoint document");
  inv->add_option("--layout", inv_layout, "layout PNG")->required();
  inv->add_option("--out", inv_out, "keypoint JSON output (stdout when omitted)");

  // train
  std::string tr_phase, tr_data, tr_in, tr_out;
  PhaseConfig tr_cfg;
  std::int64_t tr_steps = 0;
  std::optional<double> tr_lr, tr_lreason, tr_lrender;
  std::optional<int> tr_batch;
  std::uint64_t tr_seed = 0;
  ModelConfig tr_model;
  int tr_log = 50, tr_heldout = 64;
  auto* train = app.add_subcommand("train", "Run one curriculum phase or baseline");
  train->add_option("--phase", tr_phase, "0 | 1 | 2 | 3 | single | implicit")->required();
  train->add_option("--data", tr_data, "dataset directory")->required();
  train->add_option("--ckpt-in", tr_in, "starting checkpoint (phase 0 may start from scratch)");
  train->add_option("--ckpt-out", tr_out, "output checkpoint")->required();
  train->add_option("--steps", tr_steps, "optimisation steps");
  train->add_option("--lr", tr_lr, "learning rate");
  train->add_option("--lambda-reason", tr_lreason, "reasoning loss weight");
  train->add_option("--lambda-render", tr_lrender, "rendering loss weight");
  train->add_option("--batch", tr_batch, "batch size");
  train->add_option("--seed", tr_seed, "run seed");
  train->add_option("--log-every", tr_log, "steps per logged loss window");
  train->add_option("--heldout", tr_heldout, "held-out samples scored at phase start and end");
  train->add_option("--d-model", tr_model.d_model, "fresh model width");
  train->add_option("--heads", tr_model.n_heads, "fresh model attention heads");
  train->add_option("--blocks", tr_model.n_blocks, "fresh model blocks");
  train->add_option("--rank", tr_model.lora_rank, "fresh model adapter rank");
  train->add_option("--model-seed", tr_model.seed, "fresh model initialisation seed");

  // eval
  std::string ev_ckpt, ev_data, ev_report;
  EvalOptions ev_opt;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset and write a JSON report");
  eval->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
  eval->add_option("--data", ev_data, "dataset directory")->required();
  eval->add_option("--count", ev_opt.count, "samples to evaluate");
  eval->add_option("--seed", ev_opt.seed, "sampling seed");
  eval->add_option("--steps", ev_opt.steps, "sampler steps");
  eval->add_option("--report", ev_report, "report path")->required();
  eval->add_flag("--ground-truth", ev_opt.ground_truth, "score ground-truth layouts and images instead of the model");

  // gradcheck
  std::uint64_t gc_seed = 1;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients in 64-bit");
  gc->add_option("--seed", gc_seed, "seed");

  // sample
  std::string sa_ckpt, sa_scene, sa_out;
  std::optional<std::uint64_t> sa_scene_seed;
  std::uint64_t sa_seed = 0;
  int sa_steps = kDefaultSamplingSteps;
  PromptArgs sa_prompt;
  auto* sample = app.add_subcommand("sample", "Generate layout, keypoints and image for one scene");
  sample->add_option("--ckpt", sa_ckpt, "checkpoint")->required();
  sample->add_option("--scene", sa_scene, "scene PNG");
  sample->add_option("--scene-seed", sa_scene_seed, "synthesise the scene from this seed");
  sample->add_option("--seed", sa_seed, "sampling seed");
  sample->add_option("--steps", sa_steps, "sampler steps");
  sample->add_option("--out", sa_out, "output directory")->required();
  add_prompt_options(sample, sa_prompt);

  // render
  std::string re_ckpt, re_scene, re_keypoints, re_out;
  std::optional<std::uint64_t> re_scene_seed;
  std::uint64_t re_seed = 0;
  int re_steps = kDefaultSamplingSteps;
  PromptArgs re_prompt;
  auto* render = app.add_subcommand("render", "Render an image from edited keypoints over a scene");
  render->add_option("--ckpt", re_ckpt, "checkpoint")->required();
  render->add_option("--scene", re_scene, "scene PNG");
  render->add_option("--scene-seed", re_scene_seed, "synthesise the scene from this seed");
  render->add_option("--keypoints", re_keypoints, "keypoint JSON")->required();
  render->add_option("--seed", re_seed, "sampling seed");
  render->add_option("--steps", re_steps, "sampler steps");
  render->add_option("--out", re_out, "output directory")->required();
  add_prompt_options(render, re_prompt);

  // serve
  std::string sv_ckpt, sv_sessions = "sessions", sv_host = "0.0.0.0";
  int sv_port = 8080, sv_workers = 2;
  auto* serve = app.add_subcommand("serve", "Serve the HTTP API");
  serve->add_option("--ckpt", sv_ckpt, "checkpoint")->required();
  serve->add_option("--port", sv_port, "port");
  serve->add_option("--host", sv_host, "bind address");
  serve->add_option("--sessions", sv_sessions, "session store directory");
  serve->add_option("--workers", sv_workers, "concurrent inference slots");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      WorldConfig wc;
      wc.width = wc.height = gd_size;
      const auto manifest = build_dataset(gd_count, gd_seed, gd_out, wc);
      std::cout << "wrote " << gd_count << " samples, manifest " << manifest.string() << "\n";
    } else if (*inv) {
      const InversionResult r = invert_layout(read_png(inv_layout));
      const std::string text = serialize_keypoint_doc(r.doc, 2) + "\n";
      if (inv_out.empty()) {
        std::cout << text;
      } else {
        write_text(inv_out, text);
      }
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
    } else if (*train) {
      const Phase phase = parse_phase(tr_phase);
      PhaseConfig cfg = PhaseConfig::for_phase(phase, tr_steps, tr_seed);
      if (tr_lr) cfg.lr = *tr_lr;
      if (tr_lreason) cfg.lambda_reason = *tr_lreason;
      if (tr_lrender) cfg.lambda_render = *tr_lrender;
      if (tr_batch) cfg.batch_size = *tr_batch;
      cfg.log_every = tr_log;
      cfg.heldout_count = tr_heldout;
      cfg.validate();
      const Dataset ds = load_dataset(tr_data);
      if (ds.samples.empty()) throw ConfigError("dataset is empty");
      Checkpoint in = [&] {
        if (!tr_in.empty()) return load_checkpoint(tr_in);
        if (phase != Phase::pretrain) throw ConfigError("phase " + tr_phase + " needs --ckpt-in");
        tr_model.image_size = ds.samples.front().scene.width;
        return initial_checkpoint(tr_model);
      }();
      const TrainingSet data = encode_dataset(ds, in.model.config().patch);
      std::cerr << "phase " << tr_phase << ": " << data.train.size() << " train / " << data.holdout.size()
                << " held-out samples, " << cfg.steps << " steps, config " << cfg.to_json().dump() << "\n";
      const auto t0 = std::chrono::steady_clock::now();
      StepLosses window{};
      int n = 0;
      const Checkpoint out = run_phase(data, in, cfg, [&](const StepLosses& s) {
        window.reason += s.reason;
        window.render += s.render;
        window.total += s.total;
        if (++n == cfg.log_every || s.step + 1 == cfg.steps) {
          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          std::fprintf(stderr, "step %lld/%lld reason %.5f render %.5f total %.5f (%.1fs)\n",
                       static_cast<long long>(s.step + 1), static_cast<long long>(cfg.steps), window.reason / n,
                       window.render / n, window.total / n, secs);
          window = {};
          n = 0;
        }
      });
      save_checkpoint(out.model, out.state, tr_out);
      const auto [start, end] = heldout_delta(out.state);
      std::printf("phase %s done: held-out loss %.6f -> %.6f, checkpoint %s (%s)\n", tr_phase.c_str(), start, end,
                  tr_out.c_str(), checkpoint_hash(tr_out).c_str());
    } else if (*eval) {
      const Checkpoint ck = load_checkpoint(ev_ckpt);
      const Dataset ds = load_dataset(ev_data, ev_opt.count);
      const EvalReport report = evaluate(ck, checkpoint_hash(ev_ckpt), ds, ev_opt);
      write_text(ev_report, serialize_report(report));
      std::cout << to_json(report.aggregates).dump(2) << "\n";
    } else if (*gc) {
      bool ok = true;
      std::printf("%-44s %12s %10s %s\n", "case", "max rel err", "tolerance", "result");
      for (const auto& c : gradcheck_suite(gc_seed)) {
        std::printf("%-44s %12.3e %10.1e %s\n", c.name.c_str(), c.report.max_rel_error, c.tolerance,
                    c.passed() ? "PASS" : "FAIL");
        for (const auto& e : c.report.entries)
          std::printf("  %-42s %12.3e  (%zu checked)\n", e.name.c_str(), e.max_rel_error, e.checked);
        ok = ok && c.passed();
      }
      return ok ? 0 : 1;
    } else if (*sample) {
      const Checkpoint ck = load_checkpoint(sa_ckpt);
      const Image scene = scene_from_args(sa_scene, sa_scene_seed, ck.model.config().image_size);
      const auto out = generate(ck, {{scene, sa_prompt.spec(), sa_seed}}, sa_steps).front();
      std::filesystem::create_directories(sa_out);
      const std::filesystem::path dir(sa_out);
      write_png((dir / "scene.png").string(), scene);
      write_png((dir / "image.png").string(), out.image);
      if (out.layout) {
        write_png((dir / "layout.png").string(), *out.layout);
        write_text((dir / "keypoints.json").string(), serialize_keypoint_doc(out.inversion->doc, 2) + "\n");
      }
      std::cout << "wrote " << sa_out << " (seed " << sa_seed << ", steps " << sa_steps << ")\n";
    } else if (*render) {
      const Checkpoint ck = load_checkpoint(re_ckpt);
      const Image scene = scene_from_args(re_scene, re_scene_seed, ck.model.config().image_size);
      const KeypointDoc doc = parse_keypoint_doc(read_text(re_keypoints));
      if (doc.width != scene.width || doc.height != scene.height) throw ShapeError("keypoint canvas differs from scene");
      const Image layout = render_layout(scene, doc.persons);
      const Image image = render_from_layout(ck, layout, re_prompt.spec(), re_seed, re_steps);
      std::filesystem::create_directories(re_out);
      const std::filesystem::path dir(re_out);
      write_png((dir / "layout.png").string(), layout);
      write_png((dir / "image.png").string(), image);
      std::cout << "wrote " << re_out << " (seed " << re_seed << ", steps " << re_steps << ")\n";
    } else if (*serve) {
      ServiceConfig sc;
      sc.checkpoint_path = sv_ckpt;
      sc.session_dir = sv_sessions;
      sc.workers = sv_workers;
      Service service(sc);
      std::cerr << "serving checkpoint " << service.checkpoint_id() << " on " << sv_host << ":" << sv_port << "\n";
      if (!service.listen(sv_host, sv_port)) throw IoError(sv_host + ":" + std::to_string(sv_port), "cannot listen");
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
