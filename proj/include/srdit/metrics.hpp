#pragma once

// Kernel two-sample distance between feature sets and analytic
// multiply-add accounting for dense versus routed forward passes.

#include "srdit/autograd.hpp"
#include "srdit/losses.hpp"
#include "srdit/model.hpp"

#include <string>
#include <vector>

namespace srdit::metrics {

struct FeatureSet {
  Matrix<double> values;  // n_samples x feature_width
  std::string extractor;
};

enum class KernelKind { kPolynomial, kRbf };

struct KernelSpec {
  KernelKind kind = KernelKind::kPolynomial;
  int degree = 3;
  double scale = 0.0;   // polynomial: 0 means 1 / feature_width
  double offset = 1.0;  // polynomial
  double bandwidth = 0.0;  // rbf: 0 means the median pairwise distance

  static KernelSpec polynomial() { return {}; }
  static KernelSpec rbf() {
    KernelSpec k;
    k.kind = KernelKind::kRbf;
    return k;
  }
};

/// Unbiased squared-MMD estimate.
///
/// Equal sample counts use the paired U-statistic, whose cross term also
/// skips i == j, so a == b elementwise gives exactly 0. Unequal counts use the
/// off-diagonal within-set means and the full cross mean.
double kernel_distance(const FeatureSet& a, const FeatureSet& b, const KernelSpec& spec = {});

/// Mean-pooled frozen-encoder token features of latent-layout samples.
template <typename T>
FeatureSet extract_features(const Matrix<T>& latents, const losses::FrozenEncoder& encoder) {
  auto enc = losses::encode_frozen<T>(encoder, latents);
  FeatureSet fs;
  fs.extractor = "frozen_encoder_meanpool";
  fs.values.resize(latents.rows(), encoder.feature_width());
  const int p = encoder.positions();
  for (Eigen::Index s = 0; s < latents.rows(); ++s) {
    fs.values.row(s) = enc.tokens.middleRows(s * p, p).template cast<double>().colwise().mean();
  }
  return fs;
}

struct BlockFlops {
  int tokens = 0;
  double attention_proj = 0;    // Q, K, V and output projections
  double attention_scores = 0;  // QK^T and PV
  double ffn = 0;
  double modulation = 0;  // adaLN vector, per sample
  [[nodiscard]] double attention() const { return attention_proj + attention_scores; }
  [[nodiscard]] double total() const { return attention() + ffn + modulation; }
};

struct FlopReport {
  std::vector<BlockFlops> blocks;
  double embed = 0;
  double conditioning = 0;
  double fusion = 0;
  double head = 0;
  double mid_total = 0;
  double total = 0;
};

/// Multiply-adds per sample for one forward pass. Routed passes run the
/// middle blocks on the route plan's kept-token budget.
FlopReport flops_estimate(const model::ModelConfig& config, bool routed);

/// Multiply-adds of one block over `tokens` tokens.
BlockFlops block_flops(const model::ModelConfig& config, int tokens);

}  // namespace srdit::metrics
