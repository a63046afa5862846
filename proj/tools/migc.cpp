// migc: command-line driver for the toy multi-instance generation stack.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "migc/migc.hpp"

namespace fs = std::filesystem;
using namespace migc;

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::kCapacity: return 3;
    case ErrorKind::kMissingState: return 4;
    case ErrorKind::kNumeric: return 5;
    default: return 2;
  }
}

/// Sampling options shared by generate and edit. Values only override the
/// base configuration when given on the command line or in the config file.
struct RunFlags {
  RunConfig v;
  std::vector<std::string> instance_blocks, refined_blocks;
  std::uint64_t seed = 0;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> opts;
  CLI::Option* seed_opt = nullptr;

  void attach(CLI::App* app) {
    auto add = [&](CLI::Option* o, std::function<void(RunConfig&)> apply) { opts.emplace_back(o, std::move(apply)); };
    add(app->add_option("--steps", v.steps, "sampling steps")->capture_default_str()->check(CLI::PositiveNumber),
        [this](RunConfig& c) { c.steps = v.steps; });
    add(app->add_option("--sigma-max", v.sigma_max, "first sigma of the linear ramp")->capture_default_str(),
        [this](RunConfig& c) { c.sigma_max = v.sigma_max; });
    add(app->add_option("--sigma-min", v.sigma_min, "last sigma of the linear ramp")->capture_default_str(),
        [this](RunConfig& c) { c.sigma_min = v.sigma_min; });
    add(app->add_option("--cfg-scale", v.cfg_scale, "classifier-free guidance scale")->capture_default_str(),
        [this](RunConfig& c) { c.cfg_scale = v.cfg_scale; });
    add(app->add_option("--fraction", v.plan.control_fraction, "share of steps running the Instance Shader")
            ->capture_default_str(),
        [this](RunConfig& c) { c.plan.control_fraction = v.plan.control_fraction; });
    add(app->add_option("--alpha", v.plan.alpha, "instance weight of the Refined Shader")->capture_default_str(),
        [this](RunConfig& c) { c.plan.alpha = v.plan.alpha; });
    add(app->add_option("--beta", v.plan.beta, "global weight of the Refined Shader")->capture_default_str(),
        [this](RunConfig& c) { c.plan.beta = v.plan.beta; });
    add(app->add_option("--instance-blocks", instance_blocks, "blocks running the Instance Shader (default mid up-1)"),
        [this](RunConfig& c) { c.plan.instance_shader_blocks = parse_blocks(instance_blocks); });
    add(app->add_option("--refined-blocks", refined_blocks, "blocks running the Refined Shader (default all)"),
        [this](RunConfig& c) { c.plan.refined_shader_blocks = parse_blocks(refined_blocks); });
    add(app->add_option("--capacity", v.denoiser.capacity, "aggregation slots N")->capture_default_str(),
        [this](RunConfig& c) { c.denoiser.capacity = v.denoiser.capacity; });
    add(app->add_option("--shader-seed", v.shader_seed, "seed of the random shader init")->capture_default_str(),
        [this](RunConfig& c) { c.shader_seed = v.shader_seed; });
    add(app->add_option("--checkpoint", v.checkpoint, "shader checkpoint with per-block entries"),
        [this](RunConfig& c) { c.checkpoint = v.checkpoint.empty() ? "" : fs::absolute(v.checkpoint).string(); });
    seed_opt = app->add_option("--seed", seed, "override the scene seed");
  }

  static std::set<BlockId> parse_blocks(const std::vector<std::string>& names) {
    std::set<BlockId> out;
    for (const auto& n : names)
      if (n != "none") out.insert(parse_block(n));
    return out;
  }

  RunConfig apply(RunConfig base) const {
    for (const auto& [opt, fn] : opts)
      if (opt->count() > 0) fn(base);
    return base;
  }
};

void print_calls(const RunOutput& out) {
  for (BlockId b : kAllBlocks) {
    auto it = out.result.stats.instance_shader_calls.find(b);
    if (it != out.result.stats.instance_shader_calls.end())
      std::cout << "  instance shader on " << block_name(b) << ": " << it->second << " calls\n";
  }
}

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy multi-instance generation: sampling, iterative editing, evaluation and training"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand all subcommand help");
  app.set_config("--config", "", "TOML file with option defaults, one [subcommand] table per subcommand");
  app.fallthrough();

  // generate
  auto* gen = app.add_subcommand("generate", "sample a scene and start an editing session");
  std::string gen_scene, gen_out;
  RunFlags gen_flags;
  gen->add_option("--scene", gen_scene, "scene JSON")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "output (session) directory")->required();
  gen_flags.attach(gen);

  // edit
  auto* edit = app.add_subcommand("edit", "re-sample a session with a changed scene, keeping unmodified regions");
  std::string edit_session, edit_scene;
  RunFlags edit_flags;
  edit->add_option("--session", edit_session, "session directory from generate/edit")->required();
  edit->add_option("--scene", edit_scene, "new scene JSON")->required()->check(CLI::ExistingFile);
  edit_flags.attach(edit);

  // eval
  auto* ev = app.add_subcommand("eval", "score detections against benchmark layouts");
  std::string ev_layouts, ev_dets, ev_out = ".", ev_colors;
  std::size_t ev_jobs = 1;
  ev->add_option("--layouts", ev_layouts, "layouts JSON")->required()->check(CLI::ExistingFile);
  ev->add_option("--detections", ev_dets, "detections JSON")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", ev_out, "directory for report.json and table.csv")->capture_default_str();
  ev->add_option("--colors", ev_colors, "HSV range override JSON")->check(CLI::ExistingFile);
  ev->add_option("--jobs", ev_jobs, "parallel per-image workers")->capture_default_str()->check(CLI::PositiveNumber);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the toy shader stack");
  double gc_eps = 1e-5;
  std::uint64_t gc_seed = 5;
  std::size_t gc_h = 4, gc_w = 4, gc_n = 2;
  bool gc_corrupt = false;
  gc->add_option("--epsilon", gc_eps, "central-difference step, within [1e-7, 1e-3]")->capture_default_str();
  gc->add_option("--seed", gc_seed)->capture_default_str();
  gc->add_option("--height", gc_h, "feature height")->capture_default_str();
  gc->add_option("--width", gc_w, "feature width")->capture_default_str();
  gc->add_option("--instances", gc_n, "instances in the check sample")->capture_default_str();
  gc->add_flag("--corrupt-analytic", gc_corrupt, "test hook: perturb the analytic gradient")->group("");

  // bench-build
  auto* bb = app.add_subcommand("bench-build", "build benchmark levels L2..L6 from a layout pool");
  std::string bb_pool, bb_out;
  std::vector<std::size_t> bb_counts = {2, 2, 2, 2, 2};
  std::uint64_t bb_seed = 0;
  bb->add_option("--pool", bb_pool, "layout pool JSON")->required()->check(CLI::ExistingFile);
  bb->add_option("--out", bb_out, "benchmark layouts JSON")->required();
  bb->add_option("--per-level", bb_counts, "layouts for L2 L3 L4 L5 L6")->expected(5)->capture_default_str();
  bb->add_option("--seed", bb_seed, "color and order seed")->capture_default_str();

  // train-toy
  auto* tt = app.add_subcommand("train-toy", "train a toy shader on the synthetic box-shading task");
  TrainConfig tt_cfg;
  std::string tt_mode = "text", tt_out, tt_trace;
  std::uint64_t tt_seed = 1;
  std::size_t tt_samples = 4;
  tt->add_option("--steps", tt_cfg.steps, "gradient-descent steps")->capture_default_str();
  tt->add_option("--lr", tt_cfg.lr, "learning rate")->capture_default_str();
  tt->add_option("--epsilon", tt_cfg.fd_epsilon, "finite-difference step")->capture_default_str();
  tt->add_option("--mode", tt_mode, "text or image")->check(CLI::IsMember({"text", "image"}))->capture_default_str();
  tt->add_option("--seed", tt_seed)->capture_default_str();
  tt->add_option("--samples", tt_samples, "synthetic scenes in the batch")->capture_default_str();
  tt->add_option("--out", tt_out, "checkpoint path");
  tt->add_option("--trace", tt_trace, "CSV file for the loss trace");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      const SceneSpec scene = load_scene(gen_scene);
      SceneSpec s = scene;
      if (gen_flags.seed_opt->count()) s.seed = gen_flags.seed;
      const RunConfig cfg = gen_flags.apply(RunConfig{});
      const RunOutput out = run_generate(s, cfg);
      save_session(gen_out, "generate", cfg, s, out);
      std::cout << "wrote " << (fs::path(gen_out) / "manifest.json").string() << " (" << out.result.trajectory.size()
                << " latents)\n";
      print_calls(out);
      return 0;
    }
    if (*edit) {
      const SessionState prev = load_session(edit_session);
      SceneSpec s = load_scene(edit_scene);
      if (edit_flags.seed_opt->count()) s.seed = edit_flags.seed;
      const RunConfig cfg = edit_flags.apply(prev.config);
      const RunOutput out = run_edit(prev, s, cfg);
      save_session(edit_session, "edit", cfg, s, out);
      std::cout << "iteration " << out.iteration << ": " << out.modified_pixels << " modified pixels\n";
      print_calls(out);
      return 0;
    }
    if (*ev) {
      const auto layouts = parse_layouts(read_json_file(ev_layouts));
      const auto dets = parse_detections(read_json_file(ev_dets));
      const ColorTable table = ev_colors.empty() ? ColorTable::defaults() : parse_color_table(read_json_file(ev_colors));
      const EvalReport rep = aggregate(evaluate_all(layouts, dets, table, ev_jobs));
      fs::create_directories(ev_out);
      write_json_file(fs::path(ev_out) / "report.json", report_to_json(rep));
      std::ofstream(fs::path(ev_out) / "table.csv") << report_to_csv(rep);
      std::cout << "level      ISR   ImageSR    MIoU\n";
      for (const auto& [key, m] : rep.levels)
        std::printf("%-8s %6.4f  %6.4f  %6.4f\n", key.c_str(), m.isr, m.image_sr, m.miou);
      return 0;
    }
    if (*gc) {
      require_epsilon(gc_eps);
      const GradCheckSetup setup = toy_gradcheck_setup(gc_seed, gc_h, gc_w, gc_n);
      ShaderGradCheckOptions opt;
      opt.epsilon = gc_eps;
      opt.corrupt_analytic = gc_corrupt;
      const GradCheckResult res = grad_check_shader(setup.params, setup.batch, setup.cfg, opt);
      for (const auto& [g, e] : res.worst_by_group) std::printf("  %-14s worst relative error %.3e\n", to_string(g), e);
      std::printf("%s: %zu parameters, worst relative error %.3e (tolerance %.0e)\n",
                  res.passed() ? "PASS" : "FAIL", res.checked, res.worst, kGradCheckTolerance);
      return res.passed() ? 0 : 1;
    }
    if (*bb) {
      BenchmarkConfig cfg;
      cfg.seed = bb_seed;
      cfg.per_level.clear();
      for (std::size_t i = 0; i < bb_counts.size(); ++i) cfg.per_level[kMinLevel + i] = bb_counts[i];
      const auto layouts = build_benchmark(parse_pool(read_json_file(bb_pool)), cfg);
      write_json_file(bb_out, layouts_to_json(layouts));
      std::cout << "wrote " << layouts.size() << " layouts to " << bb_out << "\n";
      return 0;
    }
    if (*tt) {
      const TrainMode mode = tt_mode == "image" ? TrainMode::kImage : TrainMode::kText;
      tt_cfg.mode = mode;
      const ToyTrainingSetup setup = toy_training_setup(mode, tt_seed, tt_samples);
      tt_cfg.on_step = [&](std::size_t step, const LossBreakdown<double>& l) {
        if (step % 20 == 0)
          std::cout << "step " << step << "  total " << fmt(l.total) << "  ldm " << fmt(l.l_ldm) << "  ihbt "
                    << fmt(l.l_ihbt) << "\n";
      };
      const TrainResult res = train_toy(setup.params, setup.batch, setup.cfg, tt_cfg);
      std::cout << "initial " << fmt(res.loss_trace.front()) << "  final " << fmt(res.loss_trace.back()) << "\n";
      if (!tt_out.empty()) write_checkpoint(tt_out, {{"toy", res.params}});
      if (!tt_trace.empty()) {
        std::ofstream out(tt_trace);
        out << "step,total\n" << std::setprecision(17);
        for (std::size_t i = 0; i < res.loss_trace.size(); ++i) out << i << ',' << res.loss_trace[i] << '\n';
      }
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
