#pragma once

// Diffusion transformer backbone with a leading diffused class-embedding
// token, dense prefix blocks, routed middle blocks, MASK padding + stream
// fusion, dense suffix blocks, and an adaLN-modulated output head.
//
// Latent tensors cross the public boundary in "latent layout": one row per
// sample holding C*H*W values in channel-major (C, H, W) order. Inside the
// graph everything is in "token layout": one row per (sample, grid position)
// holding the C channel values.

#include "srdit/autograd.hpp"
#include "srdit/blocks.hpp"
#include "srdit/params.hpp"
#include "srdit/routing.hpp"
#include "srdit/schedule.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace srdit::model {

using ag::Graph;
using ag::Var;

/// Label used for the unconditional (null) class embedding.
inline constexpr int kNullClass = -1;

struct ModelConfig {
  int grid_h = 8;
  int grid_w = 8;
  int latent_channels = 4;
  int width = 64;
  int n_heads = 4;
  int n_dense_pre = 2;
  int n_mid = 2;
  int n_dense_post = 2;
  double drop_ratio = 0.75;
  blocks::Activation activation = blocks::Activation::kGelu;
  int mlp_ratio = 4;
  int repa_tap_block = 1;  // zero-based; one third of the default six blocks
  bool value_residual = true;
  bool qk_norm = true;
  bool rope = true;
  bool reg = true;  // leading diffused class-embedding token
  int n_classes = 4;
  int feature_width = 32;  // frozen-encoder feature width (REPA target and CLS width)
  int projector_hidden = 128;
  double rope_base = 10000.0;

  [[nodiscard]] int total_blocks() const { return n_dense_pre + n_mid + n_dense_post; }
  [[nodiscard]] int patch_tokens() const { return grid_h * grid_w; }
  [[nodiscard]] int seq_len() const { return patch_tokens() + (reg ? 1 : 0); }
  [[nodiscard]] int head_dim() const { return width / n_heads; }
  [[nodiscard]] int latent_dim() const { return latent_channels * grid_h * grid_w; }
  /// Width of a sampler state row: latents plus the CLS token when present.
  [[nodiscard]] int state_dim() const { return latent_dim() + (reg ? width : 0); }

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

/// Latent layout (B x C*H*W) -> token layout (B*H*W x C).
template <typename T>
Matrix<T> latents_to_tokens(const Matrix<T>& latents, int channels, int positions) {
  if (latents.cols() != static_cast<Eigen::Index>(channels) * positions) {
    throw ShapeError("latents_to_tokens: expected " + std::to_string(channels * positions) + " values per sample, got " +
                     std::to_string(latents.cols()));
  }
  Matrix<T> out(latents.rows() * positions, channels);
  for (Eigen::Index s = 0; s < latents.rows(); ++s) {
    for (int c = 0; c < channels; ++c) {
      for (int p = 0; p < positions; ++p) out(s * positions + p, c) = latents(s, c * positions + p);
    }
  }
  return out;
}

template <typename T>
Matrix<T> tokens_to_latents(const Matrix<T>& tokens, int channels, int positions) {
  if (tokens.cols() != channels || tokens.rows() % positions != 0) throw ShapeError("tokens_to_latents: shape");
  const Eigen::Index batch = tokens.rows() / positions;
  Matrix<T> out(batch, static_cast<Eigen::Index>(channels) * positions);
  for (Eigen::Index s = 0; s < batch; ++s) {
    for (int c = 0; c < channels; ++c) {
      for (int p = 0; p < positions; ++p) out(s, c * positions + p) = tokens(s * positions + p, c);
    }
  }
  return out;
}

/// DiT-style sinusoidal embedding of t (scaled by 1000), one row per entry.
template <typename T>
Matrix<T> timestep_frequencies(std::span<const double> t, int dim) {
  const int half = dim / 2;
  Matrix<T> out = Matrix<T>::Zero(static_cast<Eigen::Index>(t.size()), dim);
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (int j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * j / half);
      const double arg = 1000.0 * t[i] * freq;
      out(static_cast<Eigen::Index>(i), j) = static_cast<T>(std::cos(arg));
      out(static_cast<Eigen::Index>(i), half + j) = static_cast<T>(std::sin(arg));
    }
  }
  return out;
}

template <typename T>
struct ConditioningState {
  Matrix<T> time_embedding;   // B x d
  Matrix<T> class_embedding;  // B x d
  Matrix<T> combined;         // B x d
};

template <typename T>
struct ClsToken {
  Matrix<T> clean;   // B x d, projected frozen-encoder CLS
  Matrix<T> noised;  // B x d, pre-norm
  Matrix<T> normed;  // B x d, after wg_norm
  Matrix<T> target;  // B x d, velocity target
};

template <typename T>
struct BlockParams {
  blocks::RmsNormParams<T> norm1, norm2;
  blocks::AttentionParams<T> attn;
  blocks::FfnParams<T> ffn;
  blocks::LinearParams<T> ada;  // c -> 6d (shift/scale/gate for attention and FFN)
};

enum class PathMode { kFull, kWeak };

template <typename T>
class Model {
 public:
  struct ForwardInputs {
    const Matrix<T>* x_tokens = nullptr;    // (B*H*W x C) noised latents, token layout
    std::span<const double> t;              // B
    std::span<const int> labels;            // B, kNullClass for unconditional
    const Matrix<T>* cls_noised = nullptr;  // (B x d), required with reg
    const routing::RoutePlan* plan = nullptr;
    /// rope id handed to the CLS slot; the slot is skipped regardless
    int cls_rope_id = blocks::kNoRope;
  };

  struct ForwardOutputs {
    Var<T> velocity;      // (B*H*W x C)
    Var<T> cls_velocity;  // (B x d), invalid without reg
    Var<T> tapped;        // (B*M x d) patch tokens after the REPA tap block
    std::vector<int> tapped_positions;  // M grid positions, shared by every sample
  };

  Model(ModelConfig config, std::uint64_t seed) : cfg_(std::move(config)) {
    cfg_.validate();
    build();
    initialize(seed);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  [[nodiscard]] const blocks::RopeTable& rope_table() const { return rope_table_; }

  /// Blocks run since the last reset; used to verify which path executed.
  [[nodiscard]] int blocks_executed() const { return blocks_executed_; }
  void reset_block_counter() { blocks_executed_ = 0; }

  // ------------------------------------------------------------------------
  // Graph API

  Var<T> embed_patches(Graph<T>& g, const Matrix<T>& x_tokens) {
    if (x_tokens.cols() != cfg_.latent_channels || x_tokens.rows() % cfg_.patch_tokens() != 0) {
      throw ShapeError("embed_patches: expected token rows with " + std::to_string(cfg_.latent_channels) +
                       " channels, got " + shape_str(x_tokens.rows(), x_tokens.cols()));
    }
    return blocks::apply_linear(g, g.constant(x_tokens), embed_);
  }

  /// Combined conditioning vector c (B x d).
  Var<T> conditioning(Graph<T>& g, std::span<const double> t, std::span<const int> labels) {
    if (t.size() != labels.size()) throw ShapeError("conditioning: t and labels differ in length");
    std::vector<int> rows(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const int y = labels[i];
      if (y != kNullClass && (y < 0 || y >= cfg_.n_classes)) {
        throw std::out_of_range("class id " + std::to_string(y) + " outside [0," + std::to_string(cfg_.n_classes) + ")");
      }
      rows[i] = y == kNullClass ? cfg_.n_classes : y;
    }
    Var<T> freq = g.constant(timestep_frequencies<T>(t, cfg_.width));
    Var<T> temb = blocks::apply_linear(g, ag::silu(blocks::apply_linear(g, freq, t_fc1_)), t_fc2_);
    Var<T> yemb = ag::gather_rows(g.param(*y_table_), std::move(rows));
    return temb + yemb;
  }

  ForwardOutputs forward(Graph<T>& g, const ForwardInputs& in) {
    const int batch = checked_batch(in);
    const int L = cfg_.seq_len();
    if (in.plan != nullptr && in.plan->n_tokens != L) {
      throw ShapeError("forward: route plan covers " + std::to_string(in.plan->n_tokens) + " tokens, sequence has " +
                       std::to_string(L));
    }
    Var<T> c_act = ag::silu(conditioning(g, in.t, in.labels));
    Var<T> x = assemble_sequence(g, in, batch);

    const std::vector<int> full_ids = sequence_rope_ids(in.cls_rope_id);
    const auto full_angles = blocks::rope_angles<T>(rope_table_, full_ids, cfg_.reg);
    blocks::AttentionContext<T> full_ctx{L, cfg_.rope ? &full_angles : nullptr, std::nullopt};

    ForwardOutputs out;
    int block_index = 0;
    auto tap = [&](Var<T> h, const routing::RoutePlan* plan) {
      if (block_index != cfg_.repa_tap_block) return;
      std::tie(out.tapped, out.tapped_positions) = tap_patches(h, plan, batch);
    };

    std::optional<Var<T>> v0;
    for (int i = 0; i < cfg_.n_dense_pre; ++i, ++block_index) {
      x = run_block(g, blocks_[static_cast<std::size_t>(block_index)], x, c_act, full_ctx, v0);
      tap(x, nullptr);
    }
    if (cfg_.n_mid > 0) {
      const Var<T> dense = x;
      const routing::RoutePlan* plan = in.plan;
      Var<T> h = dense;
      std::vector<int> sparse_ids = full_ids;
      std::optional<Var<T>> v_ref = v0;
      if (plan != nullptr) {
        h = routing::gather_tokens(dense, *plan);
        sparse_ids = routing::rope_ids(*plan, cfg_.reg);
        if (cfg_.reg && !plan->kept.empty() && plan->kept.front() == 0) sparse_ids.front() = in.cls_rope_id;
        if (v0) v_ref = routing::gather_tokens(*v0, *plan);
      }
      const auto sparse_angles = blocks::rope_angles<T>(rope_table_, sparse_ids, cfg_.reg && plan_keeps_cls(plan));
      blocks::AttentionContext<T> sparse_ctx{static_cast<Eigen::Index>(sparse_ids.size()),
                                             cfg_.rope ? &sparse_angles : nullptr, std::nullopt};
      for (int i = 0; i < cfg_.n_mid; ++i, ++block_index) {
        h = run_block(g, blocks_[static_cast<std::size_t>(block_index)], h, c_act, sparse_ctx, v_ref);
        tap(h, plan);
      }
      Var<T> padded = plan != nullptr ? routing::pad_with_mask(h, *plan, g.param(*mask_token_)) : h;
      x = routing::fuse_streams(g, dense, padded, fusion_);
    }
    for (int i = 0; i < cfg_.n_dense_post; ++i, ++block_index) {
      x = run_block(g, blocks_[static_cast<std::size_t>(block_index)], x, c_act, full_ctx, v0);
      tap(x, nullptr);
    }
    std::tie(out.velocity, out.cls_velocity) = final_layer(g, x, c_act, batch);
    return out;
  }

  /// Unconditional prediction with the routed middle blocks skipped: the
  /// fusion consumes an all-MASK sparse stream.
  std::pair<Var<T>, Var<T>> forward_weak(Graph<T>& g, const Matrix<T>& x_tokens, std::span<const double> t,
                                         const Matrix<T>* cls_noised) {
    const std::vector<int> null_labels(t.size(), kNullClass);
    ForwardInputs in;
    in.x_tokens = &x_tokens;
    in.t = t;
    in.labels = null_labels;
    in.cls_noised = cls_noised;
    const int batch = checked_batch(in);
    const int L = cfg_.seq_len();
    Var<T> c_act = ag::silu(conditioning(g, t, null_labels));
    Var<T> x = assemble_sequence(g, in, batch);
    const std::vector<int> ids = sequence_rope_ids(blocks::kNoRope);
    const auto angles = blocks::rope_angles<T>(rope_table_, ids, cfg_.reg);
    blocks::AttentionContext<T> ctx{L, cfg_.rope ? &angles : nullptr, std::nullopt};
    std::optional<Var<T>> v0;
    int block_index = 0;
    for (int i = 0; i < cfg_.n_dense_pre; ++i, ++block_index) {
      x = run_block(g, blocks_[static_cast<std::size_t>(block_index)], x, c_act, ctx, v0);
    }
    block_index += cfg_.n_mid;
    if (cfg_.n_mid > 0) {
      Var<T> masks = ag::repeat_rows(g.param(*mask_token_), static_cast<Eigen::Index>(batch) * L);
      x = routing::fuse_streams(g, x, masks, fusion_);
    }
    for (int i = 0; i < cfg_.n_dense_post; ++i, ++block_index) {
      x = run_block(g, blocks_[static_cast<std::size_t>(block_index)], x, c_act, ctx, v0);
    }
    return final_layer(g, x, c_act, batch);
  }

  /// Two-layer SiLU MLP from model width to the frozen-encoder feature width.
  Var<T> repa_project(Graph<T>& g, Var<T> tapped) {
    if (tapped.cols() != cfg_.width) {
      throw ShapeError("repa_project: tapped width " + std::to_string(tapped.cols()) + " != model width " +
                       std::to_string(cfg_.width));
    }
    return blocks::apply_linear(g, ag::silu(blocks::apply_linear(g, tapped, repa_fc1_)), repa_fc2_);
  }

  // ------------------------------------------------------------------------
  // Eager API

  /// Fixed projection of frozen-encoder CLS vectors (B x feature_width) into
  /// model width.
  Matrix<T> project_cls(const Matrix<T>& encoder_cls) const {
    if (encoder_cls.cols() != cfg_.feature_width) throw ShapeError("project_cls: width mismatch");
    return encoder_cls * cls_in_->value;
  }

  ClsToken<T> make_cls_token(const Matrix<T>& clean, std::span<const double> t, const Matrix<T>& eps,
                             schedule::PathKind kind) {
    if (clean.cols() != cfg_.width || eps.rows() != clean.rows() || eps.cols() != clean.cols() ||
        clean.rows() != static_cast<Eigen::Index>(t.size())) {
      throw ShapeError("make_cls_token: expected (B x " + std::to_string(cfg_.width) + ") inputs");
    }
    ClsToken<T> tok;
    tok.clean = clean;
    tok.noised = schedule::noisy_sample_batch<T>(clean, eps, t, 1, kind);
    tok.target = schedule::velocity_target_batch<T>(clean, eps, t, 1, kind);
    Graph<T> g;
    g.set_grad_enabled(false);
    tok.normed = blocks::rms_norm(g, g.constant(tok.noised), wg_norm_).value();
    return tok;
  }

  ConditioningState<T> build_conditioning(std::span<const double> t, std::span<const int> labels) {
    Graph<T> g;
    g.set_grad_enabled(false);
    ConditioningState<T> st;
    Var<T> c = conditioning(g, t, labels);
    Var<T> freq = g.constant(timestep_frequencies<T>(t, cfg_.width));
    st.time_embedding = blocks::apply_linear(g, ag::silu(blocks::apply_linear(g, freq, t_fc1_)), t_fc2_).value();
    st.combined = c.value();
    st.class_embedding = st.combined - st.time_embedding;
    return st;
  }

  /// Velocity of a batch of sampler states (B x state_dim) at per-sample t.
  Matrix<T> predict(const Matrix<T>& state, std::span<const double> t, std::span<const int> labels, PathMode mode) {
    if (state.cols() != cfg_.state_dim() || state.rows() != static_cast<Eigen::Index>(t.size())) {
      throw ShapeError("predict: state " + shape_str(state.rows(), state.cols()) + " but expected width " +
                       std::to_string(cfg_.state_dim()));
    }
    const int P = cfg_.patch_tokens();
    const Matrix<T> x_tokens = latents_to_tokens<T>(state.leftCols(cfg_.latent_dim()), cfg_.latent_channels, P);
    Matrix<T> cls;
    if (cfg_.reg) cls = state.rightCols(cfg_.width);
    Graph<T> g;
    g.set_grad_enabled(false);
    std::pair<Var<T>, Var<T>> v;
    if (mode == PathMode::kWeak) {
      v = forward_weak(g, x_tokens, t, cfg_.reg ? &cls : nullptr);
    } else {
      ForwardInputs in;
      in.x_tokens = &x_tokens;
      in.t = t;
      in.labels = labels;
      in.cls_noised = cfg_.reg ? &cls : nullptr;
      auto out = forward(g, in);
      v = {out.velocity, out.cls_velocity};
    }
    Matrix<T> result(state.rows(), state.cols());
    result.leftCols(cfg_.latent_dim()) = tokens_to_latents<T>(v.first.value(), cfg_.latent_channels, P);
    if (cfg_.reg) result.rightCols(cfg_.width) = v.second.value();
    return result;
  }

 private:
  int checked_batch(const ForwardInputs& in) const {
    if (in.x_tokens == nullptr) throw std::invalid_argument("forward: missing latents");
    const int P = cfg_.patch_tokens();
    if (in.x_tokens->cols() != cfg_.latent_channels || in.x_tokens->rows() % P != 0) {
      throw ShapeError("forward: latents " + shape_str(in.x_tokens->rows(), in.x_tokens->cols()) +
                       " do not match the configured grid");
    }
    const auto batch = static_cast<int>(in.x_tokens->rows() / P);
    if (static_cast<int>(in.t.size()) != batch || static_cast<int>(in.labels.size()) != batch) {
      throw ShapeError("forward: batch of " + std::to_string(batch) + " latents but " + std::to_string(in.t.size()) +
                       " timesteps and " + std::to_string(in.labels.size()) + " labels");
    }
    if (cfg_.reg) {
      if (in.cls_noised == nullptr || in.cls_noised->rows() != batch || in.cls_noised->cols() != cfg_.width) {
        throw ShapeError("forward: CLS token input must be (B x width)");
      }
    }
    return batch;
  }

  [[nodiscard]] bool plan_keeps_cls(const routing::RoutePlan* plan) const {
    return plan == nullptr || (!plan->kept.empty() && plan->kept.front() == 0);
  }

  std::vector<int> sequence_rope_ids(int cls_rope_id) const {
    std::vector<int> ids;
    ids.reserve(static_cast<std::size_t>(cfg_.seq_len()));
    if (cfg_.reg) ids.push_back(cls_rope_id);
    for (int p = 0; p < cfg_.patch_tokens(); ++p) ids.push_back(p);
    return ids;
  }

  /// [CLS, patches...] per sample, stacked sample-major.
  Var<T> assemble_sequence(Graph<T>& g, const ForwardInputs& in, int batch) {
    Var<T> patches = embed_patches(g, *in.x_tokens);
    if (!cfg_.reg) return patches;
    Var<T> cls = blocks::rms_norm(g, g.constant(*in.cls_noised), wg_norm_);
    const int P = cfg_.patch_tokens();
    const int L = cfg_.seq_len();
    std::vector<int> order(static_cast<std::size_t>(batch) * L);
    // rows [0, batch) of the stacked input are CLS tokens, patches follow
    for (int s = 0; s < batch; ++s) {
      order[static_cast<std::size_t>(s) * L] = s;
      for (int p = 0; p < P; ++p) order[static_cast<std::size_t>(s) * L + 1 + p] = batch + s * P + p;
    }
    return ag::gather_rows(ag::concat_rows(cls, patches), std::move(order));
  }

  Var<T> modulate(Var<T> x, Var<T> shift, Var<T> scale, Eigen::Index seq_len) {
    Var<T> sc = ag::repeat_rows(scale, seq_len);
    Var<T> sh = ag::repeat_rows(shift, seq_len);
    return x + ag::mul(x, sc) + sh;
  }

  Var<T> run_block(Graph<T>& g, BlockParams<T>& p, Var<T> x, Var<T> c_act, blocks::AttentionContext<T> ctx,
                   std::optional<Var<T>>& v0) {
    ++blocks_executed_;
    const Eigen::Index d = cfg_.width;
    Var<T> mod = blocks::apply_linear(g, c_act, p.ada);
    Var<T> h = modulate(blocks::rms_norm(g, x, p.norm1), ag::slice_cols(mod, 0, d), ag::slice_cols(mod, d, d), ctx.seq_len);
    if (v0) ctx.value_ref = *v0;
    auto [a, v] = blocks::attention_layer(g, h, p.attn, ctx);
    if (!v0) v0 = v;
    x = x + ag::mul(ag::repeat_rows(ag::slice_cols(mod, 2 * d, d), ctx.seq_len), a);
    h = modulate(blocks::rms_norm(g, x, p.norm2), ag::slice_cols(mod, 3 * d, d), ag::slice_cols(mod, 4 * d, d), ctx.seq_len);
    return x + ag::mul(ag::repeat_rows(ag::slice_cols(mod, 5 * d, d), ctx.seq_len), blocks::ffn(g, h, p.ffn));
  }

  std::pair<Var<T>, std::vector<int>> tap_patches(Var<T> h, const routing::RoutePlan* plan, int batch) const {
    const int L = plan != nullptr ? plan->n_kept() : cfg_.seq_len();
    std::vector<int> positions;
    std::vector<int> local_rows;
    for (int i = 0; i < L; ++i) {
      const int token = plan != nullptr ? plan->kept[static_cast<std::size_t>(i)] : i;
      if (cfg_.reg && token == 0) continue;
      positions.push_back(cfg_.reg ? token - 1 : token);
      local_rows.push_back(i);
    }
    std::vector<int> rows;
    rows.reserve(static_cast<std::size_t>(batch) * local_rows.size());
    for (int s = 0; s < batch; ++s) {
      for (int r : local_rows) rows.push_back(s * L + r);
    }
    return {ag::gather_rows(h, std::move(rows)), std::move(positions)};
  }

  std::pair<Var<T>, Var<T>> final_layer(Graph<T>& g, Var<T> x, Var<T> c_act, int batch) {
    const int L = cfg_.seq_len();
    const int P = cfg_.patch_tokens();
    Var<T> mod = blocks::apply_linear(g, c_act, final_ada_);
    Var<T> h = modulate(blocks::rms_norm(g, x, final_norm_), ag::slice_cols(mod, 0, cfg_.width),
                        ag::slice_cols(mod, cfg_.width, cfg_.width), L);
    if (!cfg_.reg) return {blocks::apply_linear(g, h, head_), Var<T>{}};
    std::vector<int> patch_rows;
    std::vector<int> cls_rows;
    patch_rows.reserve(static_cast<std::size_t>(batch) * P);
    for (int s = 0; s < batch; ++s) {
      cls_rows.push_back(s * L);
      for (int p = 0; p < P; ++p) patch_rows.push_back(s * L + 1 + p);
    }
    Var<T> v = blocks::apply_linear(g, ag::gather_rows(h, std::move(patch_rows)), head_);
    Var<T> vc = blocks::apply_linear(g, ag::gather_rows(h, std::move(cls_rows)), cls_head_);
    return {v, vc};
  }

  void build() {
    const int d = cfg_.width;
    embed_ = blocks::make_linear(params_, "embed", cfg_.latent_channels, d);
    t_fc1_ = blocks::make_linear(params_, "t_embed.fc1", d, d);
    t_fc2_ = blocks::make_linear(params_, "t_embed.fc2", d, d);
    y_table_ = &params_.add("y_embed.table", cfg_.n_classes + 1, d);
    if (cfg_.reg) {
      cls_in_ = &params_.add("cls_in.weight", cfg_.feature_width, d, /*trainable=*/false);
      wg_norm_ = blocks::make_rmsnorm(params_, "wg_norm", d);
    }
    for (int b = 0; b < cfg_.total_blocks(); ++b) {
      const std::string n = "blocks." + std::to_string(b);
      BlockParams<T> bp;
      bp.norm1 = blocks::make_rmsnorm(params_, n + ".norm1", d);
      bp.norm2 = blocks::make_rmsnorm(params_, n + ".norm2", d);
      bp.attn.n_heads = cfg_.n_heads;
      bp.attn.head_dim = cfg_.head_dim();
      bp.attn.q = blocks::make_linear(params_, n + ".attn.q", d, d);
      bp.attn.k = blocks::make_linear(params_, n + ".attn.k", d, d);
      bp.attn.v = blocks::make_linear(params_, n + ".attn.v", d, d);
      bp.attn.out = blocks::make_linear(params_, n + ".attn.out", d, d);
      if (cfg_.qk_norm) {
        bp.attn.q_norm = blocks::make_rmsnorm(params_, n + ".attn.q_norm", cfg_.head_dim());
        bp.attn.k_norm = blocks::make_rmsnorm(params_, n + ".attn.k_norm", cfg_.head_dim());
      }
      if (cfg_.value_residual && b > 0) bp.attn.lambda_raw = &params_.add(n + ".attn.lambda_vr", 1, 1);
      bp.ffn = blocks::make_ffn(params_, n + ".ffn", cfg_.activation, d, cfg_.mlp_ratio);
      bp.ada = blocks::make_linear(params_, n + ".ada", d, 6 * d);
      blocks_.push_back(bp);
    }
    if (cfg_.n_mid > 0) {
      mask_token_ = &params_.add("mask_token", 1, d);
      fusion_ = routing::make_fusion(params_, "fusion", d);
    }
    final_norm_ = blocks::make_rmsnorm(params_, "final.norm", d);
    final_ada_ = blocks::make_linear(params_, "final.ada", d, 2 * d);
    head_ = blocks::make_linear(params_, "final.head", d, cfg_.latent_channels);
    if (cfg_.reg) cls_head_ = blocks::make_linear(params_, "final.cls_head", d, d);
    repa_fc1_ = blocks::make_linear(params_, "repa.fc1", d, cfg_.projector_hidden);
    repa_fc2_ = blocks::make_linear(params_, "repa.fc2", cfg_.projector_hidden, cfg_.feature_width);
    rope_table_ = blocks::rope_build(cfg_.head_dim(), cfg_.grid_h, cfg_.grid_w, cfg_.rope_base);
  }

  /// adaLN-Zero style: modulation and output heads start at zero, so every
  /// block is initially the identity.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto ends_with = [](const std::string& s, const std::string& suffix) {
      return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    for (auto& p : params_) {
      const std::string& n = p.name;
      if (ends_with(n, ".gain")) {
        p.value.setOnes();
      } else if (ends_with(n, ".bias") || ends_with(n, "lambda_vr")) {
        p.value.setZero();
      } else if (n.find(".ada.") != std::string::npos || n.rfind("final.", 0) == 0) {
        p.value.setZero();
      } else if (n == "cls_in.weight") {
        init::normal(p, 1.0 / std::sqrt(static_cast<double>(cfg_.feature_width)), rng);
      } else if (n.rfind("t_embed.", 0) == 0 || n == "y_embed.table" || n == "mask_token") {
        init::normal(p, 0.02, rng);
      } else {
        init::xavier_uniform(p, rng);
      }
    }
  }

  ModelConfig cfg_;
  ParamSet<T> params_;
  blocks::LinearParams<T> embed_, t_fc1_, t_fc2_;
  Parameter<T>* y_table_ = nullptr;
  Parameter<T>* cls_in_ = nullptr;
  blocks::RmsNormParams<T> wg_norm_;
  std::vector<BlockParams<T>> blocks_;
  Parameter<T>* mask_token_ = nullptr;
  routing::FusionParams<T> fusion_;
  blocks::RmsNormParams<T> final_norm_;
  blocks::LinearParams<T> final_ada_, head_, cls_head_;
  blocks::LinearParams<T> repa_fc1_, repa_fc2_;
  blocks::RopeTable rope_table_;
  int blocks_executed_ = 0;
};

}  // namespace srdit::model
