#include "srdit/metrics.hpp"

#include "srdit/routing.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace srdit::metrics {
namespace {

struct Kernel {
  KernelSpec spec;
  double scale = 1.0;
  double gamma = 1.0;

  double operator()(const Matrix<double>& x, Eigen::Index i, const Matrix<double>& y, Eigen::Index j) const {
    if (spec.kind == KernelKind::kPolynomial) {
      return std::pow(scale * x.row(i).dot(y.row(j)) + spec.offset, spec.degree);
    }
    return std::exp(-gamma * (x.row(i) - y.row(j)).squaredNorm());
  }
};

double median_pairwise_distance(const Matrix<double>& a, const Matrix<double>& b) {
  Matrix<double> pooled(a.rows() + b.rows(), a.cols());
  pooled << a, b;
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(pooled.rows() * (pooled.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < pooled.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < pooled.rows(); ++j) d.push_back((pooled.row(i) - pooled.row(j)).norm());
  }
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid;
}

Kernel resolve(const KernelSpec& spec, const Matrix<double>& a, const Matrix<double>& b) {
  Kernel k{spec};
  if (spec.kind == KernelKind::kPolynomial) {
    if (spec.degree < 1) throw std::invalid_argument("kernel_distance: polynomial degree must be >= 1");
    k.scale = spec.scale > 0.0 ? spec.scale : 1.0 / static_cast<double>(a.cols());
  } else {
    double h = spec.bandwidth > 0.0 ? spec.bandwidth : median_pairwise_distance(a, b);
    if (!(h > 0.0)) h = 1.0;
    k.gamma = 1.0 / (2.0 * h * h);
  }
  return k;
}

double offdiag_sum(const Kernel& k, const Matrix<double>& x) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.rows(); ++j) {
      if (i != j) s += k(x, i, x, j);
    }
  }
  return s;
}

}  // namespace

double kernel_distance(const FeatureSet& a, const FeatureSet& b, const KernelSpec& spec) {
  if (a.extractor != b.extractor) {
    throw std::invalid_argument("kernel_distance: feature sets come from different extractors ('" + a.extractor +
                                "' vs '" + b.extractor + "')");
  }
  const Eigen::Index n = a.values.rows();
  const Eigen::Index m = b.values.rows();
  if (n < 2 || m < 2) throw std::invalid_argument("kernel_distance: need at least 2 samples per set");
  if (a.values.cols() != b.values.cols()) throw ShapeError("kernel_distance: feature widths differ");
  if (!a.values.allFinite() || !b.values.allFinite()) throw std::invalid_argument("kernel_distance: non-finite features");

  const Kernel k = resolve(spec, a.values, b.values);
  const double saa = offdiag_sum(k, a.values);
  const double sbb = offdiag_sum(k, b.values);
  double sab = 0.0;
  if (n == m) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i != j) sab += k(a.values, i, b.values, j);
      }
    }
    return (saa + sbb - 2.0 * sab) / static_cast<double>(n * (n - 1));
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) sab += k(a.values, i, b.values, j);
  }
  return saa / static_cast<double>(n * (n - 1)) + sbb / static_cast<double>(m * (m - 1)) -
         2.0 * sab / static_cast<double>(n * m);
}

BlockFlops block_flops(const model::ModelConfig& config, int tokens) {
  const double n = tokens;
  const double d = config.width;
  const double hidden = blocks::ffn_hidden_width(config.activation, config.width, config.mlp_ratio);
  const double ffn_mats = config.activation == blocks::Activation::kSwiGlu ? 3.0 : 2.0;
  BlockFlops f;
  f.tokens = tokens;
  f.attention_proj = 4.0 * n * d * d;
  f.attention_scores = 2.0 * n * n * d;
  f.ffn = ffn_mats * n * d * hidden;
  f.modulation = 6.0 * d * d;
  return f;
}

FlopReport flops_estimate(const model::ModelConfig& config, bool routed) {
  config.validate();
  const int L = config.seq_len();
  const int sparse = routed ? routing::kept_budget(L, config.drop_ratio) : L;
  const double d = config.width;
  FlopReport r;
  for (int b = 0; b < config.total_blocks(); ++b) {
    const bool mid = b >= config.n_dense_pre && b < config.n_dense_pre + config.n_mid;
    r.blocks.push_back(block_flops(config, mid ? sparse : L));
    if (mid) r.mid_total += r.blocks.back().total();
  }
  r.embed = static_cast<double>(config.patch_tokens()) * config.latent_channels * d;
  r.conditioning = 2.0 * d * d;
  r.fusion = config.n_mid > 0 ? L * 2.0 * d * d : 0.0;
  r.head = 2.0 * d * d + static_cast<double>(config.patch_tokens()) * d * config.latent_channels +
           (config.reg ? d * d : 0.0);
  r.total = r.embed + r.conditioning + r.fusion + r.head;
  for (const auto& b : r.blocks) r.total += b.total();
  return r;
}

}  // namespace srdit::metrics
