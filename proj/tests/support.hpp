#pragma once

#include "srdit/autograd.hpp"
#include "srdit/params.hpp"

#include <doctest.h>

#include <functional>
#include <random>
#include <string>

namespace srdit::test {

inline Matrix<double> randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline double max_abs(const Matrix<double>& a) { return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff(); }

/// Builds a scalar loss on a fresh graph. Returns the loss node.
using LossBuilder = std::function<ag::Var<double>(ag::Graph<double>&)>;

/// Worst per-tensor ||analytic - numeric|| / (||analytic|| + ||numeric||)
/// over every trainable parameter.
inline double grad_check(ParamSet<double>& ps, const LossBuilder& build, std::string* worst_name = nullptr,
                         double h = 1e-6) {
  {
    ag::Graph<double> g;
    auto loss = build(g);
    ps.zero_grad();
    g.backward(loss);
  }
  auto eval = [&] {
    ag::Graph<double> g;
    g.set_grad_enabled(false);
    return build(g).scalar();
  };
  double worst = 0.0;
  for (auto& p : ps) {
    if (!p.trainable) continue;
    Matrix<double> num(p.value.rows(), p.value.cols());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& x = p.value.data()[i];
      const double x0 = x;
      x = x0 + h;
      const double up = eval();
      x = x0 - h;
      const double down = eval();
      x = x0;
      num.data()[i] = (up - down) / (2 * h);
    }
    const double denom = p.grad.norm() + num.norm();
    const double rel = denom == 0.0 ? 0.0 : (p.grad - num).norm() / denom;
    if (rel >= worst) {
      worst = rel;
      if (worst_name != nullptr) *worst_name = p.name;
    }
  }
  return worst;
}

/// sum(w .* y) for a fixed random w: a scalar that touches every output.
inline ag::Var<double> probe(ag::Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto& g = y.graph();
  return ag::sum(ag::mul(y, g.constant(randn(y.rows(), y.cols(), rng))));
}

}  // namespace srdit::test
