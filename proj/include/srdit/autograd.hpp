#pragma once

// Minimal tape-based reverse-mode autodiff over row-major Eigen matrices.
//
// Every value is a 2-D matrix. Rows are usually tokens (samples stacked
// sample-major), columns are features. Ops record a closure that pushes the
// output gradient back into their inputs; Graph::backward replays the tape in
// reverse creation order, which is a valid topological order.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace srdit {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

/// A named, trainable (or frozen) tensor owned by a model.
template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

namespace ag {

template <typename T>
class Graph;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, int id) : g_(g), id_(id) {}

  [[nodiscard]] bool valid() const { return g_ != nullptr; }
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] Graph<T>& graph() const { return *g_; }
  [[nodiscard]] const Matrix<T>& value() const { return g_->value(id_); }
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] T scalar() const { return value()(0, 0); }

 private:
  Graph<T>* g_ = nullptr;
  int id_ = -1;
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Matrix<T>&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Matrix<T> v) { return push(std::move(v), false); }

  /// Leaf that receives a gradient but is not tied to a Parameter.
  Var<T> input(Matrix<T> v) { return push(std::move(v), true); }

  /// Leaf referencing a parameter's storage; gradients are accumulated into
  /// `p.grad` by backward(). Frozen parameters behave like constants.
  Var<T> param(Parameter<T>& p) {
    Node n;
    n.external = &p.value;
    n.requires_grad = p.trainable && grad_enabled_;
    n.param = p.trainable ? &p : nullptr;
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  /// Records an op output. The backward closure is dropped when no input
  /// needs a gradient.
  Var<T> record(Matrix<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_) {
      for (const auto& v : inputs) needs = needs || (v.valid() && requires_grad(v.id()));
    }
    Var<T> out = push(std::move(value), needs);
    if (needs) nodes_.back().backward = std::move(fn);
    return out;
  }

  [[nodiscard]] const Matrix<T>& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.external != nullptr ? *n.external : n.value;
  }

  [[nodiscard]] bool requires_grad(int id) const {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }

  /// Gradient buffer for a node, zero-initialized on first touch.
  Matrix<T>& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      const auto& v = value(id);
      n.grad.setZero(v.rows(), v.cols());
    }
    return n.grad;
  }

  /// grad(id) += delta, assigning on the first contribution.
  template <typename E>
  void add_grad(int id, const E& delta) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      n.grad = delta;
    } else {
      n.grad += delta;
    }
  }

  /// add_grad for matrix products, evaluated without a temporary.
  template <typename E>
  void add_grad_product(int id, const E& product) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      n.grad.noalias() = product;
    } else {
      n.grad.noalias() += product;
    }
  }

  [[nodiscard]] const Matrix<T>* grad_if_any(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.grad.size() == 0 ? nullptr : &n.grad;
  }

  /// Backpropagates d(loss)/d(.) with loss a 1x1 node.
  void backward(Var<T> loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw ShapeError("backward: loss must be 1x1, got " + shape_str(loss.rows(), loss.cols()));
    }
    if (!requires_grad(loss.id())) return;
    grad(loss.id())(0, 0) += T(1);
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.size() == 0) continue;
      if (n.param != nullptr) {
        if (n.param->grad.size() == 0) {
          n.param->grad = n.grad;
        } else {
          n.param->grad += n.grad;
        }
      }
      if (n.backward) {
        n.backward(*this, n.grad);
        n.grad.resize(0, 0);  // interior gradients are not kept
      }
    }
  }

  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    const Matrix<T>* external = nullptr;
    Matrix<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  Var<T> push(Matrix<T> v, bool needs) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = needs && grad_enabled_;
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  // deque keeps references to earlier nodes stable while the tape grows
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

namespace detail {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) +
                     " vs " + shape_str(b.rows(), b.cols()));
  }
}

template <typename T>
void accumulate(Graph<T>& g, const Var<T>& v, const auto& delta) {
  if (v.valid() && g.requires_grad(v.id())) g.add_grad(v.id(), delta);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "add");
  auto& g = a.graph();
  return g.record(a.value() + b.value(), {a, b}, [a, b](Graph<T>& g, const Matrix<T>& gy) {
    detail::accumulate(g, a, gy);
    detail::accumulate(g, b, gy);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "sub");
  auto& g = a.graph();
  return g.record(a.value() - b.value(), {a, b}, [a, b](Graph<T>& g, const Matrix<T>& gy) {
    detail::accumulate(g, a, gy);
    detail::accumulate(g, b, -gy);
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "mul");
  auto& g = a.graph();
  Matrix<T> y = a.value().cwiseProduct(b.value());
  return g.record(std::move(y), {a, b}, [a, b](Graph<T>& g, const Matrix<T>& gy) {
    detail::accumulate(g, a, gy.cwiseProduct(b.value()));
    detail::accumulate(g, b, gy.cwiseProduct(a.value()));
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  auto& g = a.graph();
  return g.record(a.value() * s, {a}, [a, s](Graph<T>& g, const Matrix<T>& gy) {
    detail::accumulate(g, a, gy * s);
  });
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, T s) { return scale(a, s); }
template <typename T>
Var<T> operator*(T s, Var<T> a) { return scale(a, s); }

/// Applies f elementwise; df receives (x, f(x)) and returns f'(x).
/// Elementwise op over whole arrays. f and df take the input as an Eigen
/// array; df is evaluated only during backward.
template <typename T, typename F, typename DF>
Var<T> unary(Var<T> a, F f, DF df) {
  auto& g = a.graph();
  Matrix<T> y = f(a.value().array()).matrix();
  return g.record(std::move(y), {a}, [a, df](Graph<T>& g, const Matrix<T>& gy) {
    detail::accumulate(g, a, (gy.array() * df(a.value().array())).matrix());
  });
}

template <typename T>
Var<T> square(Var<T> a) {
  return unary(a, [](const auto& x) { return x.square(); }, [](const auto& x) { return T(2) * x; });
}

template <typename T>
Var<T> silu(Var<T> a) {
  return unary(
      a, [](const auto& x) { return x / (T(1) + (-x).exp()); },
      [](const auto& x) {
        const auto s = (T(1) / (T(1) + (-x).exp())).eval();
        return (s * (T(1) + x * (T(1) - s))).eval();
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(Var<T> a) {
  auto& g = a.graph();
  Matrix<T> y(1, 1);
  y(0, 0) = a.value().sum();
  return g.record(std::move(y), {a}, [a](Graph<T>& g, const Matrix<T>& gy) {
    if (g.requires_grad(a.id())) g.grad(a.id()).array() += gy(0, 0);
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const auto n = static_cast<T>(a.value().size());
  return scale(sum(a), T(1) / n);
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " x " +
                     shape_str(b.rows(), b.cols()));
  }
  auto& g = a.graph();
  Matrix<T> y = a.value() * b.value();
  return g.record(std::move(y), {a, b}, [a, b](Graph<T>& g, const Matrix<T>& gy) {
    if (g.requires_grad(a.id())) g.add_grad_product(a.id(), gy * b.value().transpose());
    if (g.requires_grad(b.id())) g.add_grad_product(b.id(), a.value().transpose() * gy);
  });
}

/// y = x W + b with W stored (in x out) and b a 1 x out row (optional).
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b = {}) {
  if (x.cols() != w.rows()) {
    throw ShapeError("linear: input " + shape_str(x.rows(), x.cols()) + " vs weight " +
                     shape_str(w.rows(), w.cols()));
  }
  if (b.valid() && (b.rows() != 1 || b.cols() != w.cols())) {
    throw ShapeError("linear: bias " + shape_str(b.rows(), b.cols()));
  }
  auto& g = x.graph();
  Matrix<T> y = x.value() * w.value();
  if (b.valid()) y.rowwise() += b.value().row(0);
  return g.record(std::move(y), {x, w, b}, [x, w, b](Graph<T>& g, const Matrix<T>& gy) {
    if (g.requires_grad(x.id())) g.add_grad_product(x.id(), gy * w.value().transpose());
    if (g.requires_grad(w.id())) g.add_grad_product(w.id(), x.value().transpose() * gy);
    if (b.valid() && g.requires_grad(b.id())) g.add_grad(b.id(), gy.colwise().sum());
  });
}

// ---------------------------------------------------------------------------
// Structural ops

/// Repeats each row of a (B x d) matrix `group` times -> (B*group x d).
template <typename T>
Var<T> repeat_rows(Var<T> a, Eigen::Index group) {
  auto& g = a.graph();
  const Eigen::Index b = a.rows();
  Matrix<T> y(b * group, a.cols());
  for (Eigen::Index s = 0; s < b; ++s) y.middleRows(s * group, group).rowwise() = a.value().row(s);
  return g.record(std::move(y), {a}, [a, group, b](Graph<T>& g, const Matrix<T>& gy) {
    if (!g.requires_grad(a.id())) return;
    auto& ga = g.grad(a.id());
    for (Eigen::Index s = 0; s < b; ++s) ga.row(s) += gy.middleRows(s * group, group).colwise().sum();
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || start + n > a.cols()) throw ShapeError("slice_cols: out of range");
  auto& g = a.graph();
  Matrix<T> y = a.value().middleCols(start, n);
  return g.record(std::move(y), {a}, [a, start, n](Graph<T>& g, const Matrix<T>& gy) {
    if (g.requires_grad(a.id())) g.grad(a.id()).middleCols(start, n) += gy;
  });
}

template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  if (a.rows() != b.rows()) throw ShapeError("concat_cols: row mismatch");
  auto& g = a.graph();
  Matrix<T> y(a.rows(), a.cols() + b.cols());
  y << a.value(), b.value();
  const Eigen::Index ca = a.cols();
  const Eigen::Index cb = b.cols();
  return g.record(std::move(y), {a, b}, [a, b, ca, cb](Graph<T>& g, const Matrix<T>& gy) {
    detail::accumulate(g, a, gy.leftCols(ca));
    detail::accumulate(g, b, gy.rightCols(cb));
  });
}

template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  if (a.cols() != b.cols()) throw ShapeError("concat_rows: column mismatch");
  auto& g = a.graph();
  Matrix<T> y(a.rows() + b.rows(), a.cols());
  y << a.value(), b.value();
  const Eigen::Index ra = a.rows();
  const Eigen::Index rb = b.rows();
  return g.record(std::move(y), {a, b}, [a, b, ra, rb](Graph<T>& g, const Matrix<T>& gy) {
    detail::accumulate(g, a, gy.topRows(ra));
    detail::accumulate(g, b, gy.bottomRows(rb));
  });
}

/// y.row(i) = a.row(index[i]); repeated indices accumulate in backward.
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<int> index) {
  auto& g = a.graph();
  Matrix<T> y(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(index[i]) + " outside " +
                              std::to_string(a.rows()) + " rows");
    }
    y.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return g.record(std::move(y), {a}, [a, index = std::move(index)](Graph<T>& g, const Matrix<T>& gy) {
    if (!g.requires_grad(a.id())) return;
    auto& ga = g.grad(a.id());
    for (std::size_t i = 0; i < index.size(); ++i) ga.row(index[i]) += gy.row(static_cast<Eigen::Index>(i));
  });
}

/// Inverse of gather: out has `total_rows` rows, out.row(index[i]) = a.row(i),
/// every other row is a copy of the 1 x d `fill` row.
template <typename T>
Var<T> scatter_rows(Var<T> a, std::vector<int> index, Eigen::Index total_rows, Var<T> fill) {
  if (static_cast<Eigen::Index>(index.size()) != a.rows()) {
    throw ShapeError("scatter_rows: " + std::to_string(index.size()) + " indices for " +
                     std::to_string(a.rows()) + " rows");
  }
  if (fill.rows() != 1 || fill.cols() != a.cols()) throw ShapeError("scatter_rows: fill row width");
  auto& g = a.graph();
  Matrix<T> y(total_rows, a.cols());
  std::vector<char> occupied(static_cast<std::size_t>(total_rows), 0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= total_rows) throw std::out_of_range("scatter_rows: index");
    occupied[static_cast<std::size_t>(index[i])] = 1;
  }
  for (Eigen::Index r = 0; r < total_rows; ++r) {
    if (!occupied[static_cast<std::size_t>(r)]) y.row(r) = fill.value().row(0);
  }
  for (std::size_t i = 0; i < index.size(); ++i) y.row(index[i]) = a.value().row(static_cast<Eigen::Index>(i));
  return g.record(std::move(y), {a, fill},
                  [a, fill, index = std::move(index), occupied = std::move(occupied)](
                      Graph<T>& g, const Matrix<T>& gy) {
                    if (g.requires_grad(a.id())) {
                      auto& ga = g.grad(a.id());
                      for (std::size_t i = 0; i < index.size(); ++i) {
                        ga.row(static_cast<Eigen::Index>(i)) += gy.row(index[i]);
                      }
                    }
                    if (g.requires_grad(fill.id())) {
                      auto& gf = g.grad(fill.id());
                      for (Eigen::Index r = 0; r < gy.rows(); ++r) {
                        if (!occupied[static_cast<std::size_t>(r)]) gf.row(0) += gy.row(r);
                      }
                    }
                  });
}

}  // namespace ag
}  // namespace srdit
