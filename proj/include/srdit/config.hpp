#pragma once

// Run configuration and its flat "key = value" text form.

#include "srdit/losses.hpp"
#include "srdit/model.hpp"
#include "srdit/schedule.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>

namespace srdit::harness {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

struct DatasetSpec {
  int n_classes = 4;
  double noise_scale = 0.3;
  double pattern_amplitude = 0.5;
  int holdout = 256;
};

struct RunConfig {
  model::ModelConfig model;
  losses::LossWeights weights;
  AdamConfig optim;
  DatasetSpec data;
  int batch_size = 64;
  long steps = 2000;
  std::uint64_t seed = 0;
  double label_dropout = 0.1;
  long eval_every = 0;  // 0 disables periodic evaluation
  int eval_samples = 64;
  int nfe = 50;
  schedule::PathKind path = schedule::PathKind::kLinear;
  bool time_shift = true;
  std::string output_dir = "run";

  [[nodiscard]] schedule::PathSchedule path_schedule() const {
    return {path, model.latent_dim(), time_shift};
  }

  void validate() const;
};

/// Parses "key = value" lines; '#' starts a comment. Unknown keys, bad values
/// and duplicate keys raise ConfigError naming the line.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

/// Canonical text form; parse_config(to_text(c)) reproduces c.
std::string to_text(const RunConfig& config);

}  // namespace srdit::harness
