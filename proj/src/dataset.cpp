#include "srdit/dataset.hpp"

#include "srdit/sampler.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace srdit::harness {

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> salt) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (std::uint64_t s : salt) {
    words.push_back(static_cast<std::uint32_t>(s));
    words.push_back(static_cast<std::uint32_t>(s >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

std::mt19937_64 derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> salt) {
  return std::mt19937_64(derive_seed(seed, salt));
}

SyntheticDataset::SyntheticDataset(DatasetSpec spec, const model::ModelConfig& model, std::uint64_t seed)
    : spec_(spec), seed_(seed) {
  if (spec_.n_classes < 2) throw std::invalid_argument("dataset: need at least 2 classes");
  if (!(spec_.noise_scale > 0.0)) throw std::invalid_argument("dataset: noise_scale must be positive");
  const int C = model.latent_channels;
  const int H = model.grid_h;
  const int W = model.grid_w;
  encoder_ = losses::FrozenEncoder::create(C, H * W, model.feature_width, derive_seed(seed, {stream::kEncoder}));

  auto rng = derive_rng(seed, {stream::kData});
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_int_distribution<int> freq(1, 2);
  means_.resize(spec_.n_classes, static_cast<Eigen::Index>(C) * H * W);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    for (int k = 0; k < spec_.n_classes; ++k) {
      const int fh = freq(rng);
      const int fw = freq(rng);
      for (int c = 0; c < C; ++c) {
        const double offset = normal(rng);
        const double ph = phase(rng);
        for (int h = 0; h < H; ++h) {
          for (int w = 0; w < W; ++w) {
            const double arg = 2.0 * std::numbers::pi * (fh * h / static_cast<double>(H) + fw * w / static_cast<double>(W));
            means_(k, (c * H + h) * W + w) = offset + spec_.pattern_amplitude * std::sin(arg + ph);
          }
        }
      }
    }
    if (min_mean_separation() > 3.0 * spec_.noise_scale) return;
  }
  throw std::invalid_argument("dataset: could not draw class means separated by 3x the noise scale");
}

double SyntheticDataset::min_mean_separation() const {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index a = 0; a < means_.rows(); ++a) {
    for (Eigen::Index b = a + 1; b < means_.rows(); ++b) {
      const double rms = std::sqrt((means_.row(a) - means_.row(b)).squaredNorm() / static_cast<double>(means_.cols()));
      best = std::min(best, rms);
    }
  }
  return best;
}

std::vector<int> SyntheticDataset::balanced(int n) const { return sampler::balanced_labels(n, spec_.n_classes); }

SyntheticDataset generate_dataset(const DatasetSpec& spec, const model::ModelConfig& model, std::uint64_t seed) {
  return SyntheticDataset(spec, model, seed);
}

}  // namespace srdit::harness
