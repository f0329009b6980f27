// srdit: train, sample, eval and check for the desk-scale SR-DiT stack.

#include "srdit/checkpoint.hpp"
#include "srdit/checks.hpp"
#include "srdit/config.hpp"
#include "srdit/dataset.hpp"
#include "srdit/evaluate.hpp"
#include "srdit/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace srdit;
using namespace srdit::harness;

namespace {

enum Exit : int {
  kOk = 0,
  kGeneric = 1,
  kUsage = 2,
  kConfig = 3,
  kCheckpoint = 4,
  kNumeric = 5,
  kCheckFailed = 6,
};

struct Options {
  std::string config;
  std::optional<long> steps;
  std::string checkpoint;
  int num = 16;
  bool balanced = false;
  std::optional<int> nfe;
  std::string guidance = "none";
  double scale = 1.0;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool full = false;
};

RunConfig resolve_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.steps) cfg.steps = *o.steps;
  if (o.nfe) cfg.nfe = *o.nfe;
  if (!o.out.empty()) cfg.output_dir = o.out;
  cfg.validate();
  return cfg;
}

sampler::GuidanceConfig guidance_of(const Options& o) {
  sampler::GuidanceConfig g;
  g.mode = sampler::parse_guidance_mode(o.guidance);
  g.scale = o.scale;
  g.validate();
  return g;
}

int cmd_train(const Options& o) {
  TrainState state;
  RunConfig cfg;
  if (!o.checkpoint.empty()) {
    state = load_checkpoint(o.checkpoint);
    cfg = state.config;
    if (o.steps) cfg.steps = *o.steps;
    if (!o.out.empty()) cfg.output_dir = o.out;
    state.config.steps = cfg.steps;
    state.config.output_dir = cfg.output_dir;
  } else {
    cfg = resolve_config(o);
    state = init_state(cfg);
  }
  fs::create_directories(cfg.output_dir);
  const SyntheticDataset data = generate_dataset(cfg.data, cfg.model, cfg.seed);

  const fs::path log_path = fs::path(cfg.output_dir) / "loss_log.csv";
  const bool append = state.step > 0 && fs::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  if (!append) log << loss_log_header() << "\n";

  const long target = state.step + cfg.steps;
  const auto t0 = std::chrono::steady_clock::now();
  train(state, data, target, [&](const LogRow& row) {
    log << loss_log_line(row) << "\n";
    if (row.step % 100 == 0 || row.step == target) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "step %ld/%ld  velocity %.5f  total %.5f  (%.1fs)\n", row.step, target, row.loss.velocity,
                   row.loss.total, secs);
    }
    if (cfg.eval_every > 0 && row.step % cfg.eval_every == 0) {
      auto r = evaluate(state, data, cfg.eval_samples, cfg.nfe, {}, cfg.seed);
      std::fprintf(stderr, "  eval step %ld: kernel_distance %.6g (noise %.6g)\n", row.step, r.distance,
                   r.noise_distance);
    }
  });
  log.flush();
  const fs::path ckpt = fs::path(cfg.output_dir) / "checkpoint.bin";
  save_checkpoint(ckpt.string(), state);
  std::printf("trained to step %ld; checkpoint %s; log %s\n", state.step, ckpt.c_str(), log_path.c_str());
  return kOk;
}

void write_samples(const fs::path& dir, const GeneratedSamples& s, const model::ModelConfig& m) {
  fs::create_directories(dir);
  std::ofstream f(dir / "samples.csv");
  f << "# shape " << s.latents.rows() << "," << m.latent_channels << "," << m.grid_h << "," << m.grid_w << "\n";
  char buf[32];
  for (Eigen::Index i = 0; i < s.latents.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.latents.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(s.latents(i, j)));
      f << (j ? "," : "") << buf;
    }
    f << "\n";
  }
  std::ofstream l(dir / "labels.txt");
  for (int y : s.labels) l << y << "\n";

  // grid summary: per-class channel means
  std::ofstream g(dir / "summary.txt");
  const int P = m.patch_tokens();
  g << "class,count";
  for (int c = 0; c < m.latent_channels; ++c) g << ",mean_c" << c;
  g << "\n";
  for (int k = 0; k < m.n_classes; ++k) {
    int count = 0;
    std::vector<double> mean(static_cast<std::size_t>(m.latent_channels), 0.0);
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
      if (s.labels[i] != k) continue;
      ++count;
      for (int c = 0; c < m.latent_channels; ++c) {
        mean[static_cast<std::size_t>(c)] += s.latents.row(static_cast<Eigen::Index>(i)).segment(c * P, P).cast<double>().mean();
      }
    }
    g << k << "," << count;
    for (double v : mean) g << "," << (count ? v / count : 0.0);
    g << "\n";
  }
}

int cmd_sample(const Options& o) {
  if (o.checkpoint.empty()) throw CLI::ValidationError("sample", "--checkpoint is required");
  TrainState state = load_checkpoint(o.checkpoint);
  const auto& cfg = state.config;
  if (o.num < 1) throw CLI::ValidationError("--num", "must be >= 1");
  std::vector<int> labels;
  const std::uint64_t seed = o.seed.value_or(cfg.seed);
  if (o.balanced) {
    labels = sampler::balanced_labels(o.num, cfg.model.n_classes);
  } else {
    auto rng = derive_rng(seed, {stream::kSample, 1});
    std::uniform_int_distribution<int> pick(0, cfg.model.n_classes - 1);
    for (int i = 0; i < o.num; ++i) labels.push_back(pick(rng));
  }
  auto s = generate(*state.model, labels, o.nfe.value_or(cfg.nfe), guidance_of(o), cfg.path_schedule(), seed);
  const fs::path dir = o.out.empty() ? fs::path(cfg.output_dir) / "samples" : fs::path(o.out);
  write_samples(dir, s, cfg.model);
  std::printf("wrote %d samples to %s (%d steps, %d guided)\n", o.num, dir.c_str(), s.stats.steps, s.stats.guided_steps);
  return kOk;
}

int cmd_eval(const Options& o) {
  std::string line;
  if (o.checkpoint.empty()) {
    const RunConfig cfg = resolve_config(o);
    const SyntheticDataset data = generate_dataset(cfg.data, cfg.model, cfg.seed);
    const auto f = metrics::extract_features<float>(data.holdout<float>().latents, data.encoder());
    const double d = metrics::kernel_distance(f, f);
    char buf[256];
    std::snprintf(buf, sizeof buf, "kernel_distance=%.9g reference=holdout candidate=holdout n=%d extractor=%s", d,
                  static_cast<int>(f.values.rows()), f.extractor.c_str());
    line = buf;
  } else {
    TrainState state = load_checkpoint(o.checkpoint);
    const auto& cfg = state.config;
    const SyntheticDataset data = generate_dataset(cfg.data, cfg.model, cfg.seed);
    const int n = o.num > 1 ? o.num : cfg.eval_samples;
    auto r = evaluate(state, data, n, o.nfe.value_or(cfg.nfe), guidance_of(o), o.seed.value_or(cfg.seed));
    char buf[320];
    std::snprintf(buf, sizeof buf,
                  "kernel_distance=%.9g noise_distance=%.9g ratio=%.6f step=%ld n_generated=%d n_real=%d nfe=%d "
                  "guidance=%s scale=%g extractor=%s",
                  r.distance, r.noise_distance, r.ratio(), state.step, r.n_generated, r.n_real, r.nfe,
                  o.guidance.c_str(), o.scale, r.extractor.c_str());
    line = buf;
  }
  std::printf("%s\n", line.c_str());
  if (!o.out.empty()) std::ofstream(o.out) << line << "\n";
  return kOk;
}

int cmd_check(const Options& o) {
  checks::CheckOptions opt;
  opt.include_toy = o.full;
  opt.work_dir = o.out.empty() ? (fs::temp_directory_path() / "srdit_check").string() : o.out;
  bool ok = true;
  for (const auto& r : checks::run_all(opt, [](const checks::CheckResult& r) { std::printf("%s\n", r.line().c_str()); })) {
    ok = ok && r.passed;
  }
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale SR-DiT: train, sample, eval, check"};
  app.require_subcommand(1);
  Options o;

  auto* train_cmd = app.add_subcommand("train", "run the training loop, write a checkpoint and loss log");
  train_cmd->add_option("--config", o.config, "config file (key = value)");
  train_cmd->add_option("--steps", o.steps, "steps to run (from the checkpoint's step when resuming)");
  train_cmd->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint");
  train_cmd->add_option("--seed", o.seed, "override train.seed");
  train_cmd->add_option("--out", o.out, "output directory");

  auto* sample_cmd = app.add_subcommand("sample", "generate latents from a checkpoint");
  sample_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  sample_cmd->add_option("--num", o.num, "number of samples");
  sample_cmd->add_flag("--balanced", o.balanced, "labels 0..n-1 mod n_classes");
  sample_cmd->add_option("--nfe", o.nfe, "Euler steps");
  sample_cmd->add_option("--guidance", o.guidance, "none | cfg | pdg")->check(CLI::IsMember({"none", "cfg", "pdg"}));
  sample_cmd->add_option("--scale", o.scale, "guidance scale");
  sample_cmd->add_option("--seed", o.seed, "sampling seed");
  sample_cmd->add_option("--out", o.out, "output directory");

  auto* eval_cmd = app.add_subcommand("eval", "kernel distance against the held-out split");
  eval_cmd->add_option("--config", o.config, "config file (without --checkpoint: held-out vs itself)")
      ;
  eval_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  eval_cmd->add_option("--num", o.num, "generated samples");
  eval_cmd->add_option("--nfe", o.nfe, "Euler steps");
  eval_cmd->add_option("--guidance", o.guidance, "none | cfg | pdg")->check(CLI::IsMember({"none", "cfg", "pdg"}));
  eval_cmd->add_option("--scale", o.scale, "guidance scale");
  eval_cmd->add_option("--seed", o.seed, "sampling seed");
  eval_cmd->add_option("--out", o.out, "also write the report line to this file");

  auto* check_cmd = app.add_subcommand("check", "run the invariant and gradient suites");
  check_cmd->add_flag("--full", o.full, "include the toy convergence run (minutes)");
  check_cmd->add_option("--out", o.out, "scratch directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  // eval falls back to train.eval_samples
  if (app.got_subcommand(eval_cmd) && eval_cmd->count("--num") == 0) o.num = 0;

  try {
    if (app.got_subcommand(train_cmd)) return cmd_train(o);
    if (app.got_subcommand(sample_cmd)) return cmd_sample(o);
    if (app.got_subcommand(eval_cmd)) return cmd_eval(o);
    if (app.got_subcommand(check_cmd)) return cmd_check(o);
  } catch (const CLI::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kCheckpoint;
  } catch (const TrainingError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kGeneric;
  }
  return kGeneric;
}
