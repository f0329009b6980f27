#include "srdit/losses.hpp"

#include "srdit/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace srdit::losses {

CfmMode parse_cfm_mode(const std::string& s) {
  if (s == "off") return CfmMode::kOff;
  if (s == "cfm") return CfmMode::kCfm;
  if (s == "tcfm") return CfmMode::kTcfm;
  throw std::invalid_argument("unknown cfm mode '" + s + "'");
}

std::string to_string(CfmMode m) {
  switch (m) {
    case CfmMode::kOff: return "off";
    case CfmMode::kCfm: return "cfm";
    case CfmMode::kTcfm: return "tcfm";
  }
  return "unknown";
}

void LossWeights::validate() const {
  if (lambda_repa < 0 || lambda_cls < 0 || lambda_cfm < 0 || tcfm_lambda < 0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

LossBundle total_loss(const LossParts<double>& parts, const LossWeights& weights) {
  const std::pair<const char*, double> named[] = {
      {"velocity", parts.velocity}, {"repa", parts.repa}, {"cls", parts.cls}, {"cfm", parts.cfm}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) throw NonFiniteLoss(name, "value " + std::to_string(v));
  }
  LossBundle b;
  b.velocity = parts.velocity;
  b.repa = parts.repa;
  b.cls = parts.cls;
  b.cfm = parts.cfm;
  b.total = weighted_total(parts, weights);
  return b;
}

std::vector<int> shuffle_permutation(int batch, std::mt19937_64& rng) {
  if (batch < 2) throw std::invalid_argument("shuffle_permutation: batch must be >= 2");
  std::vector<int> perm(static_cast<std::size_t>(batch));
  std::iota(perm.begin(), perm.end(), 0);
  // explicit Fisher-Yates so the permutation does not depend on the
  // standard library's shuffle implementation
  for (int i = batch - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
  }
  return perm;
}

FrozenEncoder::FrozenEncoder(Matrix<double> token_proj, Matrix<double> cls_proj, int positions)
    : token_proj_(std::move(token_proj)), cls_proj_(std::move(cls_proj)), positions_(positions) {
  if (cls_proj_.rows() != token_proj_.cols() || positions_ < 1) throw ShapeError("FrozenEncoder: inconsistent shapes");
}

FrozenEncoder FrozenEncoder::create(int channels, int positions, int feature_width, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> tok(0.0, 1.0 / std::sqrt(static_cast<double>(channels)));
  std::normal_distribution<double> cls(0.0, 1.0 / std::sqrt(static_cast<double>(feature_width)));
  Matrix<double> tp(channels, feature_width);
  Matrix<double> cp(feature_width, feature_width);
  for (Eigen::Index i = 0; i < tp.size(); ++i) tp.data()[i] = tok(rng);
  for (Eigen::Index i = 0; i < cp.size(); ++i) cp.data()[i] = cls(rng);
  return FrozenEncoder(std::move(tp), std::move(cp), positions);
}

std::uint64_t FrozenEncoder::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const Matrix<double>& m) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  mix(token_proj_);
  mix(cls_proj_);
  return h;
}

template <typename T>
EncodedBatch<T> encode_frozen(const FrozenEncoder& enc, const Matrix<T>& latents) {
  if (latents.cols() != static_cast<Eigen::Index>(enc.channels()) * enc.positions()) {
    throw ShapeError("encode_frozen: latent width " + std::to_string(latents.cols()) + " does not match encoder");
  }
  EncodedBatch<T> out;
  out.tokens = enc.token_features<T>(model::latents_to_tokens<T>(latents, enc.channels(), enc.positions()));
  out.cls = enc.cls_features<T>(out.tokens);
  return out;
}

template EncodedBatch<float> encode_frozen<float>(const FrozenEncoder&, const Matrix<float>&);
template EncodedBatch<double> encode_frozen<double>(const FrozenEncoder&, const Matrix<double>&);

}  // namespace srdit::losses
