#pragma once

// Training objectives: velocity MSE, cosine representation alignment against
// a frozen encoder, class-token velocity MSE, the contrastive shuffled-target
// term (plain and time-weighted), and their weighted combination.

#include "srdit/autograd.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace srdit::losses {

using ag::Graph;
using ag::Var;

enum class CfmMode { kOff, kCfm, kTcfm };

CfmMode parse_cfm_mode(const std::string& s);
std::string to_string(CfmMode m);

struct LossWeights {
  double lambda_repa = 0.5;
  double lambda_cls = 0.03;
  double lambda_cfm = 0.05;
  CfmMode cfm_mode = CfmMode::kCfm;
  double tcfm_lambda = 0.10;

  void validate() const;
};

/// Unweighted REPA and CLS terms; the CFM entry already carries its sign and
/// weight.
template <typename S>
struct LossParts {
  S velocity{};
  S repa{};
  S cls{};
  S cfm{};
};

struct LossBundle {
  double velocity = 0.0;
  double repa = 0.0;
  double cls = 0.0;
  double cfm = 0.0;
  double total = 0.0;
};

struct NonFiniteLoss : std::runtime_error {
  NonFiniteLoss(const std::string& term, const std::string& detail)
      : std::runtime_error("non-finite loss term '" + term + "'" + (detail.empty() ? "" : ": " + detail)), term(term) {}
  std::string term;
};

inline double weighted(double x, double w) { return x * w; }
template <typename T>
Var<T> weighted(Var<T> x, double w) {
  return ag::scale(x, static_cast<T>(w));
}

/// L = vel + lambda_repa * repa + lambda_cls * cls + cfm
template <typename S>
S weighted_total(const LossParts<S>& p, const LossWeights& w) {
  return p.velocity + weighted(p.repa, w.lambda_repa) + weighted(p.cls, w.lambda_cls) + p.cfm;
}

/// Scalar assembly with the named breakdown; throws NonFiniteLoss naming the
/// first non-finite part.
LossBundle total_loss(const LossParts<double>& parts, const LossWeights& weights);

// ---------------------------------------------------------------------------
// Graph forms

template <typename T>
Var<T> velocity_loss(Var<T> pred, const Matrix<T>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw ShapeError("velocity_loss: prediction " + shape_str(pred.rows(), pred.cols()) + " vs target " +
                     shape_str(target.rows(), target.cols()));
  }
  return ag::mean(ag::square(pred - pred.graph().constant(target)));
}

template <typename T>
Var<T> cls_loss(Var<T> pred, const Matrix<T>& target) {
  return velocity_loss(pred, target);
}

/// -(1/M) sum_m cos(projected_m, target_m) over rows.
template <typename T>
Var<T> repa_loss(Var<T> projected, const Matrix<T>& targets) {
  if (projected.rows() != targets.rows() || projected.cols() != targets.cols()) {
    throw ShapeError("repa_loss: projected " + shape_str(projected.rows(), projected.cols()) + " vs targets " +
                     shape_str(targets.rows(), targets.cols()));
  }
  const Eigen::Index m = targets.rows();
  const auto& a = projected.value();
  Eigen::Matrix<T, Eigen::Dynamic, 1> na = a.rowwise().norm();
  Eigen::Matrix<T, Eigen::Dynamic, 1> nb = targets.rowwise().norm();
  for (Eigen::Index r = 0; r < m; ++r) {
    if (!(na(r) > T(0)) || !(nb(r) > T(0))) {
      throw std::domain_error("repa_loss: zero-norm token at row " + std::to_string(r));
    }
  }
  Eigen::Matrix<T, Eigen::Dynamic, 1> dots = a.cwiseProduct(targets).rowwise().sum();
  Matrix<T> y(1, 1);
  y(0, 0) = -(dots.array() / (na.array() * nb.array())).sum() / static_cast<T>(m);
  auto& g = projected.graph();
  return g.record(std::move(y), {projected}, [projected, targets, na, nb, dots, m](Graph<T>& g, const Matrix<T>& gy) {
    if (!g.requires_grad(projected.id())) return;
    const auto& a = projected.value();
    auto& ga = g.grad(projected.id());
    const T s = -gy(0, 0) / static_cast<T>(m);
    for (Eigen::Index r = 0; r < m; ++r) {
      // d cos / d a = b/(|a||b|) - (a.b) a / (|a|^3 |b|)
      const T inv = T(1) / (na(r) * nb(r));
      ga.row(r) += s * (targets.row(r) * inv - a.row(r) * (dots(r) * inv / (na(r) * na(r))));
    }
  });
}

/// Contrastive term against shuffled targets. `t` holds one timestep per
/// sample, each sample spanning `rows_per_sample` rows of pred.
template <typename T>
Var<T> cfm_loss(Var<T> pred, const Matrix<T>& shuffled_targets, const LossWeights& w, std::span<const double> t,
                Eigen::Index rows_per_sample) {
  auto& g = pred.graph();
  if (w.cfm_mode == CfmMode::kOff) return g.constant(Matrix<T>::Zero(1, 1));
  if (pred.rows() != shuffled_targets.rows() || pred.cols() != shuffled_targets.cols()) {
    throw ShapeError("cfm_loss: shape mismatch");
  }
  Var<T> sq = ag::square(pred - g.constant(shuffled_targets));
  if (w.cfm_mode == CfmMode::kCfm) return ag::scale(ag::mean(sq), static_cast<T>(-w.lambda_cfm));
  if (pred.rows() != static_cast<Eigen::Index>(t.size()) * rows_per_sample) {
    throw ShapeError("cfm_loss: one timestep per sample required");
  }
  Matrix<T> weights(pred.rows(), pred.cols());
  for (std::size_t s = 0; s < t.size(); ++s) {
    weights.middleRows(static_cast<Eigen::Index>(s) * rows_per_sample, rows_per_sample)
        .setConstant(static_cast<T>(t[s] * w.tcfm_lambda));
  }
  return ag::scale(ag::mean(ag::mul(sq, g.constant(std::move(weights)))), T(-1));
}

// ---------------------------------------------------------------------------
// Eager forms

template <typename T>
double velocity_loss(const Matrix<T>& pred, const Matrix<T>& target) {
  Graph<T> g;
  return static_cast<double>(velocity_loss(g.constant(pred), target).scalar());
}

template <typename T>
double cls_loss(const Matrix<T>& pred, const Matrix<T>& target) {
  return velocity_loss(pred, target);
}

template <typename T>
double repa_loss(const Matrix<T>& projected, const Matrix<T>& targets) {
  Graph<T> g;
  return static_cast<double>(repa_loss(g.constant(projected), targets).scalar());
}

template <typename T>
double cfm_loss(const Matrix<T>& pred, const Matrix<T>& shuffled, const LossWeights& w, std::span<const double> t,
                Eigen::Index rows_per_sample) {
  Graph<T> g;
  return static_cast<double>(cfm_loss(g.constant(pred), shuffled, w, t, rows_per_sample).scalar());
}

/// Uniform random permutation of [0, batch). Fixed points are allowed.
std::vector<int> shuffle_permutation(int batch, std::mt19937_64& rng);

/// Row-group permutation: sample s of the output is sample perm[s] of the
/// input, each sample spanning rows_per_sample rows.
template <typename T>
Matrix<T> permute_samples(const Matrix<T>& targets, std::span<const int> perm, Eigen::Index rows_per_sample) {
  if (targets.rows() != static_cast<Eigen::Index>(perm.size()) * rows_per_sample) {
    throw ShapeError("permute_samples: permutation length does not match the batch");
  }
  Matrix<T> out(targets.rows(), targets.cols());
  for (std::size_t s = 0; s < perm.size(); ++s) {
    out.middleRows(static_cast<Eigen::Index>(s) * rows_per_sample, rows_per_sample) =
        targets.middleRows(static_cast<Eigen::Index>(perm[s]) * rows_per_sample, rows_per_sample);
  }
  return out;
}

template <typename T>
Matrix<T> shuffle_targets(const Matrix<T>& targets, Eigen::Index rows_per_sample, std::mt19937_64& rng) {
  if (rows_per_sample < 1 || targets.rows() % rows_per_sample != 0) throw ShapeError("shuffle_targets: ragged batch");
  const auto batch = static_cast<int>(targets.rows() / rows_per_sample);
  if (batch < 2) throw std::invalid_argument("shuffle_targets: batch must hold at least 2 samples");
  const auto perm = shuffle_permutation(batch, rng);
  return permute_samples<T>(targets, perm, rows_per_sample);
}

// ---------------------------------------------------------------------------
// Frozen stand-in encoder

/// Fixed random token projector (C -> feature_width) and a second fixed map
/// applied to the mean-pooled token features to produce a CLS vector.
class FrozenEncoder {
 public:
  FrozenEncoder() = default;
  FrozenEncoder(Matrix<double> token_proj, Matrix<double> cls_proj, int positions);

  static FrozenEncoder create(int channels, int positions, int feature_width, std::uint64_t seed);

  [[nodiscard]] int channels() const { return static_cast<int>(token_proj_.rows()); }
  [[nodiscard]] int feature_width() const { return static_cast<int>(token_proj_.cols()); }
  [[nodiscard]] int positions() const { return positions_; }
  [[nodiscard]] const Matrix<double>& token_proj() const { return token_proj_; }
  [[nodiscard]] const Matrix<double>& cls_proj() const { return cls_proj_; }

  /// Token-layout features for token-layout latents (B*P x C) -> (B*P x f).
  template <typename T>
  Matrix<T> token_features(const Matrix<T>& x_tokens) const {
    if (x_tokens.cols() != channels() || x_tokens.rows() % positions_ != 0) {
      throw ShapeError("frozen encoder: expected token rows with " + std::to_string(channels()) + " channels");
    }
    return x_tokens * token_proj_.cast<T>();
  }

  /// CLS vector per sample: mean-pooled token features through cls_proj.
  template <typename T>
  Matrix<T> cls_features(const Matrix<T>& token_feats) const {
    const Eigen::Index batch = token_feats.rows() / positions_;
    Matrix<T> pooled(batch, token_feats.cols());
    for (Eigen::Index s = 0; s < batch; ++s) {
      pooled.row(s) = token_feats.middleRows(s * positions_, positions_).colwise().mean();
    }
    return pooled * cls_proj_.cast<T>();
  }

  /// 64-bit FNV-1a over the raw bytes of both projections.
  [[nodiscard]] std::uint64_t hash() const;

 private:
  Matrix<double> token_proj_;
  Matrix<double> cls_proj_;
  int positions_ = 0;
};

template <typename T>
struct EncodedBatch {
  Matrix<T> tokens;  // (B*P x f)
  Matrix<T> cls;     // (B x f)
};

/// Encodes latent-layout clean latents (B x C*P).
template <typename T>
EncodedBatch<T> encode_frozen(const FrozenEncoder& enc, const Matrix<T>& latents);

}  // namespace srdit::losses
