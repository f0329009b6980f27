#pragma once

// Sampling from a trained state and kernel-distance evaluation against the
// held-out split.

#include "srdit/dataset.hpp"
#include "srdit/metrics.hpp"
#include "srdit/sampler.hpp"
#include "srdit/trainer.hpp"

#include <cstdint>
#include <vector>

namespace srdit::harness {

struct GeneratedSamples {
  Matrix<float> latents;  // n x C*H*W
  std::vector<int> labels;
  sampler::SampleStats stats;
};

GeneratedSamples generate(model::Model<float>& m, const std::vector<int>& labels, int nfe,
                          const sampler::GuidanceConfig& guidance, const schedule::PathSchedule& schedule,
                          std::uint64_t seed);

struct EvalReport {
  double distance = 0.0;        // generated vs held-out
  double noise_distance = 0.0;  // standard-normal latents vs held-out
  int n_generated = 0;
  int n_real = 0;
  int nfe = 0;
  std::string extractor;
  [[nodiscard]] double ratio() const { return distance / noise_distance; }
};

/// Balanced samples from the state's model compared with the held-out split.
EvalReport evaluate(TrainState& state, const SyntheticDataset& data, int n_samples, int nfe,
                    const sampler::GuidanceConfig& guidance, std::uint64_t seed);

}  // namespace srdit::harness
