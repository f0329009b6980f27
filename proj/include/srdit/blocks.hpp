#pragma once

// Transformer building blocks: RMSNorm, axial 2D RoPE, per-head QK
// normalization, value-residual mixing, scaled dot-product attention and the
// feed-forward activation variants. Graph ops live here together with thin
// eager wrappers that evaluate them on plain matrices.

#include "srdit/autograd.hpp"
#include "srdit/params.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <unsupported/Eigen/SpecialFunctions>

namespace srdit::blocks {

using ag::Graph;
using ag::Var;

inline constexpr double kRmsEps = 1e-6;
/// rope id carried by tokens that must not be rotated (the class token)
inline constexpr int kNoRope = -1;

// ---------------------------------------------------------------------------
// Parameter bundles

template <typename T>
struct LinearParams {
  Parameter<T>* weight = nullptr;  // (in x out)
  Parameter<T>* bias = nullptr;    // (1 x out) or null
};

template <typename T>
struct RmsNormParams {
  Parameter<T>* gain = nullptr;  // (1 x d)
  double eps = kRmsEps;
};

enum class Activation { kGelu, kRelu2, kLopsidedLeakyRelu2, kSwiGlu };

Activation parse_activation(const std::string& s);
std::string to_string(Activation a);

inline constexpr double kLopsidedSlope = 0.01;

template <typename T>
struct FfnParams {
  Activation kind = Activation::kGelu;
  LinearParams<T> up;
  LinearParams<T> down;
  std::optional<LinearParams<T>> gate;  // swiglu only
};

template <typename T>
struct AttentionParams {
  int n_heads = 1;
  int head_dim = 0;
  LinearParams<T> q, k, v, out;
  std::optional<RmsNormParams<T>> q_norm, k_norm;
  Parameter<T>* lambda_raw = nullptr;  // value-residual mixing logit, null if disabled
};

/// Hidden width of the FFN for a given model width and multiplier.
inline int ffn_hidden_width(Activation kind, int width, int multiplier) {
  const int hidden = width * multiplier;
  return kind == Activation::kSwiGlu ? std::max(1, 2 * hidden / 3) : hidden;
}

template <typename T>
LinearParams<T> make_linear(ParamSet<T>& ps, const std::string& name, int in, int out, bool bias = true) {
  LinearParams<T> l;
  l.weight = &ps.add(name + ".weight", in, out);
  if (bias) l.bias = &ps.add(name + ".bias", 1, out);
  return l;
}

template <typename T>
RmsNormParams<T> make_rmsnorm(ParamSet<T>& ps, const std::string& name, int width) {
  RmsNormParams<T> n;
  n.gain = &ps.add(name + ".gain", 1, width);
  n.gain->value.setOnes();
  return n;
}

template <typename T>
Var<T> apply_linear(Graph<T>& g, Var<T> x, const LinearParams<T>& p) {
  return ag::linear(x, g.param(*p.weight), p.bias ? g.param(*p.bias) : Var<T>{});
}

// ---------------------------------------------------------------------------
// RMSNorm

/// Row-wise RMSNorm over groups of `gain.cols()` features. x may be wider than
/// the gain (a multiple of it), in which case each group is normalized on its
/// own; this is how per-head QK normalization is expressed.
template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain, double eps) {
  const Eigen::Index d = gain.cols();
  if (gain.rows() != 1 || d == 0 || x.cols() % d != 0) {
    throw ShapeError("rms_norm: width " + std::to_string(x.cols()) + " incompatible with gain width " +
                     std::to_string(d));
  }
  auto& g = x.graph();
  const Eigen::Index groups = x.rows() * (x.cols() / d);
  using Map = Eigen::Map<Matrix<T>>;
  using CMap = Eigen::Map<const Matrix<T>>;
  CMap xv(x.value().data(), groups, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv(groups);
  for (Eigen::Index i = 0; i < groups; ++i) {
    inv(i) = T(1) / std::sqrt(xv.row(i).squaredNorm() / static_cast<T>(d) + static_cast<T>(eps));
  }
  Matrix<T> y(x.rows(), x.cols());
  Map yv(y.data(), groups, d);
  const auto grow = gain.value().row(0);
  for (Eigen::Index i = 0; i < groups; ++i) yv.row(i) = xv.row(i).cwiseProduct(grow) * inv(i);
  return g.record(std::move(y), {x, gain}, [x, gain, d, groups, inv](Graph<T>& g, const Matrix<T>& gy) {
    CMap xv(x.value().data(), groups, d);
    CMap gv(gy.data(), groups, d);
    const auto grow = gain.value().row(0);
    if (g.requires_grad(x.id())) {
      Map gx(g.grad(x.id()).data(), groups, d);
      for (Eigen::Index i = 0; i < groups; ++i) {
        const auto u = gv.row(i).cwiseProduct(grow);
        const T r = inv(i);
        const T dot = u.dot(xv.row(i));
        gx.row(i) += r * u - (r * r * r * dot / static_cast<T>(d)) * xv.row(i);
      }
    }
    if (g.requires_grad(gain.id())) {
      auto& gg = g.grad(gain.id());
      for (Eigen::Index i = 0; i < groups; ++i) gg.row(0) += gv.row(i).cwiseProduct(xv.row(i)) * inv(i);
    }
  });
}

template <typename T>
Var<T> rms_norm(Graph<T>& g, Var<T> x, const RmsNormParams<T>& p) {
  return rms_norm(x, g.param(*p.gain), p.eps);
}

/// Eager RMSNorm: y = g * x / sqrt(mean(x^2) + eps) per row.
template <typename T>
Matrix<T> rmsnorm(const Matrix<T>& x, const Matrix<T>& gain, double eps = kRmsEps) {
  if (x.cols() != gain.cols()) throw ShapeError("rmsnorm: width mismatch");
  Graph<T> g;
  return rms_norm(g.constant(x), g.constant(gain), eps).value();
}

// ---------------------------------------------------------------------------
// Axial 2D rotary position embedding

struct RopeTable {
  int head_dim = 0;
  int grid_h = 0;
  int grid_w = 0;
  double base = 10000.0;
  /// (grid_h*grid_w) x (head_dim/2): angle of every rotation pair at every
  /// flat grid position. The first head_dim/4 pairs follow the row
  /// coordinate, the remaining pairs the column coordinate.
  Matrix<double> angles;

  [[nodiscard]] int positions() const { return grid_h * grid_w; }
};

RopeTable rope_build(int head_dim, int grid_h, int grid_w, double base = 10000.0);

/// Per-token cos/sin rows for one sequence (L x head_dim/2).
template <typename T>
struct RopeAngles {
  Matrix<T> cos;
  Matrix<T> sin;
};

/// Angles for a sequence whose token i sits at flat grid index rope_ids[i].
/// Tokens carrying kNoRope, and token 0 when skip_leading_cls is set, get the
/// identity rotation.
template <typename T>
RopeAngles<T> rope_angles(const RopeTable& table, std::span<const int> rope_ids, bool skip_leading_cls) {
  const auto n = static_cast<Eigen::Index>(rope_ids.size());
  const int pairs = table.head_dim / 2;
  RopeAngles<T> out{Matrix<T>::Ones(n, pairs), Matrix<T>::Zero(n, pairs)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const int id = rope_ids[static_cast<std::size_t>(i)];
    if ((i == 0 && skip_leading_cls) || id == kNoRope) continue;
    if (id < 0 || id >= table.positions()) {
      throw std::out_of_range("rope: id " + std::to_string(id) + " outside grid of " +
                              std::to_string(table.positions()));
    }
    for (int j = 0; j < pairs; ++j) {
      out.cos(i, j) = static_cast<T>(std::cos(table.angles(id, j)));
      out.sin(i, j) = static_cast<T>(std::sin(table.angles(id, j)));
    }
  }
  return out;
}

/// Rotates consecutive pairs of every head. x is (B*L x H*head_dim); the
/// angle rows are shared by every sample in the batch.
template <typename T>
Var<T> rope(Var<T> x, const RopeAngles<T>& angles) {
  const Eigen::Index seq = angles.cos.rows();
  const Eigen::Index pairs = angles.cos.cols();
  const Eigen::Index head_dim = 2 * pairs;
  if (seq == 0 || x.rows() % seq != 0 || x.cols() % head_dim != 0) {
    throw ShapeError("rope: input " + shape_str(x.rows(), x.cols()) + " vs angle table " +
                     shape_str(seq, pairs));
  }
  const Eigen::Index heads = x.cols() / head_dim;
  auto rotate = [seq, pairs, heads, head_dim](const Matrix<T>& in, const Matrix<T>& c, const Matrix<T>& s,
                                              T sign) {
    Matrix<T> out(in.rows(), in.cols());
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
      const Eigen::Index pos = r % seq;
      for (Eigen::Index h = 0; h < heads; ++h) {
        for (Eigen::Index j = 0; j < pairs; ++j) {
          const Eigen::Index col = h * head_dim + 2 * j;
          const T a = in(r, col);
          const T b = in(r, col + 1);
          const T cs = c(pos, j);
          const T sn = sign * s(pos, j);
          out(r, col) = a * cs - b * sn;
          out(r, col + 1) = a * sn + b * cs;
        }
      }
    }
    return out;
  };
  auto& g = x.graph();
  Matrix<T> y = rotate(x.value(), angles.cos, angles.sin, T(1));
  return g.record(std::move(y), {x}, [x, angles, rotate](Graph<T>& g, const Matrix<T>& gy) {
    if (g.requires_grad(x.id())) g.add_grad(x.id(), rotate(gy, angles.cos, angles.sin, T(-1)));
  });
}

/// Eager rotation of per-token vectors (rows = tokens, cols = k*head_dim).
template <typename T>
Matrix<T> rope_rotate(const Matrix<T>& vecs, const RopeTable& table, std::span<const int> rope_ids,
                      bool skip_leading_cls) {
  if (static_cast<Eigen::Index>(rope_ids.size()) != vecs.rows()) {
    throw ShapeError("rope_rotate: one rope id per token required");
  }
  if (vecs.cols() % table.head_dim != 0) throw ShapeError("rope_rotate: width is not a multiple of head_dim");
  Graph<T> g;
  return rope(g.constant(vecs), rope_angles<T>(table, rope_ids, skip_leading_cls)).value();
}

// ---------------------------------------------------------------------------
// QK normalization and value residual

template <typename T>
std::pair<Var<T>, Var<T>> qk_normalize(Graph<T>& g, Var<T> q, Var<T> k, const RmsNormParams<T>& q_norm,
                                       const RmsNormParams<T>& k_norm) {
  return {rms_norm(g, q, q_norm), rms_norm(g, k, k_norm)};
}

/// lambda = sigmoid(raw); y = lambda * v_ref + (1 - lambda) * v_cur.
template <typename T>
Var<T> value_residual_mix(Var<T> v_ref, Var<T> v_cur, Var<T> lambda_raw) {
  ag::detail::require_same_shape(v_ref, v_cur, "value_residual_mix");
  if (lambda_raw.rows() != 1 || lambda_raw.cols() != 1) throw ShapeError("value_residual_mix: lambda must be 1x1");
  auto& g = v_ref.graph();
  const T lam = T(1) / (T(1) + std::exp(-lambda_raw.scalar()));
  Matrix<T> y = lam * v_ref.value() + (T(1) - lam) * v_cur.value();
  return g.record(std::move(y), {v_ref, v_cur, lambda_raw},
                  [v_ref, v_cur, lambda_raw, lam](Graph<T>& g, const Matrix<T>& gy) {
                    ag::detail::accumulate(g, v_ref, lam * gy);
                    ag::detail::accumulate(g, v_cur, (T(1) - lam) * gy);
                    if (g.requires_grad(lambda_raw.id())) {
                      const T dot = gy.cwiseProduct(v_ref.value() - v_cur.value()).sum();
                      g.grad(lambda_raw.id())(0, 0) += lam * (T(1) - lam) * dot;
                    }
                  });
}

template <typename T>
Matrix<T> value_residual_mix(const Matrix<T>& v_ref, const Matrix<T>& v_cur, double lambda_raw) {
  Graph<T> g;
  Matrix<T> raw(1, 1);
  raw(0, 0) = static_cast<T>(lambda_raw);
  return value_residual_mix(g.constant(v_ref), g.constant(v_cur), g.constant(raw)).value();
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention

/// softmax(q k^T / sqrt(head_dim)) v for every (sample, head). Inputs are
/// (B*L x H*head_dim) with heads laid out contiguously along columns.
template <typename T>
Var<T> attention_core(Var<T> q, Var<T> k, Var<T> v, int n_heads, Eigen::Index seq_len) {
  ag::detail::require_same_shape(q, k, "attention(q,k)");
  ag::detail::require_same_shape(q, v, "attention(q,v)");
  if (n_heads < 1 || q.cols() % n_heads != 0 || seq_len < 1 || q.rows() % seq_len != 0) {
    throw ShapeError("attention: " + shape_str(q.rows(), q.cols()) + " not divisible into " +
                     std::to_string(n_heads) + " heads of sequences of length " + std::to_string(seq_len));
  }
  const Eigen::Index hd = q.cols() / n_heads;
  const Eigen::Index batch = q.rows() / seq_len;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  auto& g = q.graph();
  Matrix<T> y(q.rows(), q.cols());
  std::vector<Matrix<T>> probs(static_cast<std::size_t>(batch * n_heads));
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  // score rows padded to a multiple of 16 with -inf so the softmax runs on
  // whole vector lanes; padded entries come out as exact zeros
  const Eigen::Index padded = (seq_len + 15) / 16 * 16;
  for (Eigen::Index s = 0; s < batch; ++s) {
    for (Eigen::Index h = 0; h < n_heads; ++h) {
      Matrix<T> p(seq_len, padded);
      p.leftCols(seq_len).noalias() =
          (qv.block(s * seq_len, h * hd, seq_len, hd) * scale) * kv.block(s * seq_len, h * hd, seq_len, hd).transpose();
      p.rightCols(padded - seq_len).setConstant(-std::numeric_limits<T>::infinity());
      for (Eigen::Index i = 0; i < seq_len; ++i) {
        Eigen::Map<Eigen::Array<T, 1, Eigen::Dynamic>> row(p.row(i).data(), padded);
        row = (row - row.maxCoeff()).exp();
        row *= T(1) / row.sum();
      }
      y.block(s * seq_len, h * hd, seq_len, hd).noalias() = p.leftCols(seq_len) * vv.block(s * seq_len, h * hd, seq_len, hd);
      probs[static_cast<std::size_t>(s * n_heads + h)] = std::move(p);
    }
  }
  return g.record(std::move(y), {q, k, v},
                  [q, k, v, n_heads, seq_len, hd, batch, scale, probs = std::move(probs)](Graph<T>& g,
                                                                                          const Matrix<T>& gy) {
                    const bool gq = g.requires_grad(q.id());
                    const bool gk = g.requires_grad(k.id());
                    const bool gv = g.requires_grad(v.id());
                    for (Eigen::Index s = 0; s < batch; ++s) {
                      for (Eigen::Index h = 0; h < n_heads; ++h) {
                        const auto p = probs[static_cast<std::size_t>(s * n_heads + h)].leftCols(seq_len);
                        const auto go = gy.block(s * seq_len, h * hd, seq_len, hd);
                        if (gv) g.grad(v.id()).block(s * seq_len, h * hd, seq_len, hd).noalias() += p.transpose() * go;
                        if (!gq && !gk) continue;
                        Matrix<T> dp = go * v.value().block(s * seq_len, h * hd, seq_len, hd).transpose();
                        Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = dp.cwiseProduct(p).rowwise().sum();
                        Matrix<T> ds = p.cwiseProduct(dp.colwise() - rowdot) * scale;
                        if (gq) {
                          g.grad(q.id()).block(s * seq_len, h * hd, seq_len, hd).noalias() +=
                              ds * k.value().block(s * seq_len, h * hd, seq_len, hd);
                        }
                        if (gk) {
                          g.grad(k.id()).block(s * seq_len, h * hd, seq_len, hd).noalias() +=
                              ds.transpose() * q.value().block(s * seq_len, h * hd, seq_len, hd);
                        }
                      }
                    }
                  });
}

/// Per-layer rotary context: angles for the current (possibly routed) token
/// sequence. Absent when RoPE is disabled.
template <typename T>
struct AttentionContext {
  Eigen::Index seq_len = 0;
  const RopeAngles<T>* rope = nullptr;
  /// cached first-block values aligned with the current token sequence
  std::optional<Var<T>> value_ref;
};

/// Full attention layer: projections, optional QK norm, optional RoPE,
/// optional value-residual mixing, attention, output projection. Returns the
/// output and the layer's own (pre-mix) values so the caller can cache the
/// first block's values.
template <typename T>
std::pair<Var<T>, Var<T>> attention_layer(Graph<T>& g, Var<T> x, const AttentionParams<T>& p,
                                          const AttentionContext<T>& ctx) {
  Var<T> q = apply_linear(g, x, p.q);
  Var<T> k = apply_linear(g, x, p.k);
  Var<T> v = apply_linear(g, x, p.v);
  if (p.q_norm && p.k_norm) std::tie(q, k) = qk_normalize(g, q, k, *p.q_norm, *p.k_norm);
  if (ctx.rope != nullptr) {
    q = rope(q, *ctx.rope);
    k = rope(k, *ctx.rope);
  }
  Var<T> v_used = v;
  if (p.lambda_raw != nullptr && ctx.value_ref) v_used = value_residual_mix(*ctx.value_ref, v, g.param(*p.lambda_raw));
  Var<T> o = attention_core(q, k, v_used, p.n_heads, ctx.seq_len);
  return {apply_linear(g, o, p.out), v};
}

/// Eager attention over one sequence with unit output projection semantics:
/// softmax(q k^T / sqrt(d_head)) v per head, heads concatenated.
template <typename T>
Matrix<T> attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, int n_heads) {
  Graph<T> g;
  return attention_core(g.constant(q), g.constant(k), g.constant(v), n_heads, q.rows()).value();
}

// ---------------------------------------------------------------------------
// Activations and FFN

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
Var<T> activation(Var<T> x, Activation kind) {
  const T rsqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const T rsqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  const T slope = static_cast<T>(kLopsidedSlope);
  switch (kind) {
    case Activation::kGelu:
      return ag::unary(
          x, [rsqrt2](const auto& a) { return (T(0.5) * a * (T(1) + (a * rsqrt2).erf())).eval(); },
          [rsqrt2, rsqrt2pi](const auto& a) {
            return (T(0.5) * (T(1) + (a * rsqrt2).erf()) + a * (T(-0.5) * a.square()).exp() * rsqrt2pi).eval();
          });
    case Activation::kRelu2:
      return ag::unary(
          x, [](const auto& a) { return (a > T(0)).select(a.square(), T(0)); },
          [](const auto& a) { return (a > T(0)).select(T(2) * a, T(0)); });
    case Activation::kLopsidedLeakyRelu2:
      return ag::unary(
          x, [slope](const auto& a) { return (a > T(0)).select(a.square(), slope * a); },
          [slope](const auto& a) { return (a > T(0)).select(T(2) * a, slope); });
    case Activation::kSwiGlu:
      // the pointwise part of the gated unit; gating happens in ffn()
      return ag::silu(x);
  }
  throw std::invalid_argument("activation: unknown kind");
}

template <typename T>
Matrix<T> activation_apply(Activation kind, const Matrix<T>& x) {
  Graph<T> g;
  return activation(g.constant(x), kind).value();
}

template <typename T>
Var<T> ffn(Graph<T>& g, Var<T> x, const FfnParams<T>& p) {
  if (p.kind == Activation::kSwiGlu) {
    if (!p.gate) throw std::invalid_argument("ffn: swiglu requires a gate projection");
    Var<T> gate = ag::silu(apply_linear(g, x, *p.gate));
    return apply_linear(g, ag::mul(gate, apply_linear(g, x, p.up)), p.down);
  }
  return apply_linear(g, activation(apply_linear(g, x, p.up), p.kind), p.down);
}

template <typename T>
FfnParams<T> make_ffn(ParamSet<T>& ps, const std::string& name, Activation kind, int width, int multiplier) {
  const int hidden = ffn_hidden_width(kind, width, multiplier);
  FfnParams<T> f;
  f.kind = kind;
  f.up = make_linear(ps, name + ".up", width, hidden);
  f.down = make_linear(ps, name + ".down", hidden, width);
  if (kind == Activation::kSwiGlu) f.gate = make_linear(ps, name + ".gate", width, hidden);
  return f;
}

}  // namespace srdit::blocks
