#pragma once

// Token routing: a random subset of the sequence passes through the middle
// blocks, dropped positions are refilled with a learned MASK vector, and the
// padded sparse stream is fused with the dense stream by concat + projection.

#include "srdit/autograd.hpp"
#include "srdit/blocks.hpp"
#include "srdit/params.hpp"

#include <random>
#include <vector>

namespace srdit::routing {

using ag::Graph;
using ag::Var;

struct RoutePlan {
  int n_tokens = 0;
  std::vector<int> kept;  // strictly increasing
  double drop_ratio = 0.0;

  [[nodiscard]] int n_kept() const { return static_cast<int>(kept.size()); }
  [[nodiscard]] bool is_identity() const { return n_kept() == n_tokens; }
};

/// round(n_tokens * (1 - drop_ratio)) tokens sampled without replacement.
/// With keep_cls, index 0 is always kept and counts toward the budget.
RoutePlan make_route_plan(int n_tokens, double drop_ratio, std::mt19937_64& rng, bool keep_cls);

/// The plan that keeps everything.
RoutePlan identity_plan(int n_tokens);

/// Number of tokens a plan over n_tokens keeps (the budget rule alone).
int kept_budget(int n_tokens, double drop_ratio);

/// Row indices into a (batch * n_tokens) stacked sequence selecting the kept
/// tokens of every sample, sample-major.
std::vector<int> batch_row_index(const RoutePlan& plan, int batch);

/// Original flat grid index of every kept token for a sequence laid out as
/// [CLS, patch 0, patch 1, ...] (has_cls) or [patch 0, ...]. The CLS slot
/// carries blocks::kNoRope.
std::vector<int> rope_ids(const RoutePlan& plan, bool has_cls);

template <typename T>
struct FusionParams {
  blocks::LinearParams<T> proj;  // (2d x d)
};

template <typename T>
FusionParams<T> make_fusion(ParamSet<T>& ps, const std::string& name, int width) {
  return {blocks::make_linear(ps, name, 2 * width, width)};
}

/// Gathers the kept tokens of every sample.
template <typename T>
Var<T> gather_tokens(Var<T> seq, const RoutePlan& plan) {
  if (seq.rows() % plan.n_tokens != 0) {
    throw ShapeError("gather_tokens: " + std::to_string(seq.rows()) + " rows is not a multiple of plan length " +
                     std::to_string(plan.n_tokens));
  }
  const int batch = static_cast<int>(seq.rows() / plan.n_tokens);
  return ag::gather_rows(seq, batch_row_index(plan, batch));
}

/// Scatters the sparse tokens back to full length; dropped slots get `mask`.
template <typename T>
Var<T> pad_with_mask(Var<T> sparse, const RoutePlan& plan, Var<T> mask) {
  if (sparse.rows() % plan.n_kept() != 0) {
    throw ShapeError("pad_with_mask: sparse length " + std::to_string(sparse.rows()) +
                     " does not match the plan's kept count " + std::to_string(plan.n_kept()));
  }
  const int batch = static_cast<int>(sparse.rows() / plan.n_kept());
  return ag::scatter_rows(sparse, batch_row_index(plan, batch), static_cast<Eigen::Index>(batch) * plan.n_tokens,
                          mask);
}

/// proj([dense | padded]) per token.
template <typename T>
Var<T> fuse_streams(Graph<T>& g, Var<T> dense, Var<T> padded, const FusionParams<T>& p) {
  ag::detail::require_same_shape(dense, padded, "fuse_streams");
  return blocks::apply_linear(g, ag::concat_cols(dense, padded), p.proj);
}

// Eager forms over a single sequence (rows = tokens).

template <typename T>
std::pair<Matrix<T>, std::vector<int>> gather_tokens(const Matrix<T>& seq, const RoutePlan& plan, bool has_cls) {
  if (seq.rows() != plan.n_tokens) {
    throw ShapeError("gather_tokens: sequence length " + std::to_string(seq.rows()) + " != plan length " +
                     std::to_string(plan.n_tokens));
  }
  Graph<T> g;
  return {gather_tokens(g.constant(seq), plan).value(), rope_ids(plan, has_cls)};
}

template <typename T>
Matrix<T> pad_with_mask(const Matrix<T>& sparse, const RoutePlan& plan, const Matrix<T>& mask) {
  if (sparse.rows() != plan.n_kept()) throw ShapeError("pad_with_mask: sparse length mismatch");
  Graph<T> g;
  return pad_with_mask(g.constant(sparse), plan, g.constant(mask)).value();
}

}  // namespace srdit::routing
