#pragma once

// Synthetic class-conditional latent grids with frozen-encoder targets.

#include "srdit/config.hpp"
#include "srdit/losses.hpp"
#include "srdit/model.hpp"

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace srdit::harness {

/// Independent 64-bit seed for a named stream of a run.
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> salt);
std::mt19937_64 derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> salt);

namespace stream {
inline constexpr std::uint64_t kModel = 1;
inline constexpr std::uint64_t kData = 2;
inline constexpr std::uint64_t kEncoder = 3;
inline constexpr std::uint64_t kTrain = 4;
inline constexpr std::uint64_t kHoldout = 5;
inline constexpr std::uint64_t kSample = 6;
inline constexpr std::uint64_t kNoise = 7;
}  // namespace stream

template <typename T>
struct Batch {
  Matrix<T> latents;        // B x C*H*W, latent layout
  std::vector<int> labels;  // B
  Matrix<T> cls_targets;    // B x feature_width, frozen-encoder CLS of the clean latent
  Matrix<T> token_features; // B*H*W x feature_width
};

class SyntheticDataset {
 public:
  SyntheticDataset(DatasetSpec spec, const model::ModelConfig& model, std::uint64_t seed);

  [[nodiscard]] const DatasetSpec& spec() const { return spec_; }
  [[nodiscard]] int n_classes() const { return spec_.n_classes; }
  [[nodiscard]] int latent_dim() const { return static_cast<int>(means_.cols()); }
  /// n_classes x latent_dim
  [[nodiscard]] const Matrix<double>& class_means() const { return means_; }
  [[nodiscard]] const losses::FrozenEncoder& encoder() const { return encoder_; }

  /// Smallest per-element RMS distance between two class means.
  [[nodiscard]] double min_mean_separation() const;

  /// Uniform random classes.
  template <typename T>
  Batch<T> sample(int n, std::mt19937_64& rng) const {
    std::uniform_int_distribution<int> cls(0, spec_.n_classes - 1);
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int& y : labels) y = cls(rng);
    return sample_labels<T>(labels, rng);
  }

  template <typename T>
  Batch<T> sample_labels(const std::vector<int>& labels, std::mt19937_64& rng) const {
    std::normal_distribution<double> normal(0.0, 1.0);
    Batch<T> b;
    b.labels = labels;
    b.latents.resize(static_cast<Eigen::Index>(labels.size()), means_.cols());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const int y = labels[i];
      if (y < 0 || y >= spec_.n_classes) throw std::out_of_range("dataset: class id " + std::to_string(y));
      for (Eigen::Index j = 0; j < means_.cols(); ++j) {
        b.latents(static_cast<Eigen::Index>(i), j) = static_cast<T>(means_(y, j) + spec_.noise_scale * normal(rng));
      }
    }
    auto enc = losses::encode_frozen<T>(encoder_, b.latents);
    b.token_features = std::move(enc.tokens);
    b.cls_targets = std::move(enc.cls);
    return b;
  }

  /// The fixed held-out evaluation set: spec.holdout samples, balanced labels.
  template <typename T>
  Batch<T> holdout() const {
    auto rng = derive_rng(seed_, {stream::kHoldout});
    return sample_labels<T>(balanced(spec_.holdout), rng);
  }

 private:
  std::vector<int> balanced(int n) const;

  DatasetSpec spec_;
  std::uint64_t seed_;
  Matrix<double> means_;
  losses::FrozenEncoder encoder_;
};

/// Throws std::invalid_argument for fewer than two classes or a non-positive
/// noise scale.
SyntheticDataset generate_dataset(const DatasetSpec& spec, const model::ModelConfig& model, std::uint64_t seed);

}  // namespace srdit::harness
