#include "srdit/sampler.hpp"

namespace srdit::sampler {

GuidanceMode parse_guidance_mode(const std::string& s) {
  if (s == "none") return GuidanceMode::kNone;
  if (s == "cfg") return GuidanceMode::kCfg;
  if (s == "pdg") return GuidanceMode::kPdg;
  throw std::invalid_argument("unknown guidance mode '" + s + "'");
}

std::string to_string(GuidanceMode m) {
  switch (m) {
    case GuidanceMode::kNone: return "none";
    case GuidanceMode::kCfg: return "cfg";
    case GuidanceMode::kPdg: return "pdg";
  }
  return "unknown";
}

void GuidanceConfig::validate() const {
  if (!(scale >= 0.0)) throw std::invalid_argument("guidance scale must be >= 0");
  if (!(0.0 <= t_low && t_low <= t_high && t_high <= 1.0)) {
    throw std::invalid_argument("guidance thresholds must satisfy 0 <= low <= high <= 1");
  }
}

bool guidance_active(double t, const GuidanceConfig& config) {
  return config.mode != GuidanceMode::kNone && t >= config.t_low && t <= config.t_high;
}

std::vector<int> balanced_labels(int num_samples, int num_classes) {
  if (num_classes < 1) throw std::invalid_argument("balanced_labels: num_classes must be >= 1");
  if (num_samples < 1) throw std::invalid_argument("balanced_labels: num_samples must be >= 1");
  std::vector<int> labels(static_cast<std::size_t>(num_samples));
  for (int i = 0; i < num_samples; ++i) labels[static_cast<std::size_t>(i)] = i % num_classes;
  return labels;
}

}  // namespace srdit::sampler
