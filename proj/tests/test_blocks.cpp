#include "srdit/blocks.hpp"

#include "support.hpp"

#include <cmath>
#include <numbers>

using namespace srdit;
using namespace srdit::blocks;
using doctest::Approx;

namespace {

Matrix<double> row(std::initializer_list<double> v) {
  Matrix<double> m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

}  // namespace

TEST_CASE("rmsnorm examples") {
  CHECK(test::max_abs(rmsnorm<double>(Matrix<double>::Ones(1, 5), Matrix<double>::Ones(1, 5), 0.0) -
                      Matrix<double>::Ones(1, 5)) < 1e-15);
  const auto y = rmsnorm<double>(row({3, 4}), row({1, 1}), 0.0);
  CHECK(y(0, 0) == Approx(3 / std::sqrt(12.5)).epsilon(1e-14));
  CHECK(y(0, 1) == Approx(4 / std::sqrt(12.5)).epsilon(1e-14));
  CHECK(y(0, 0) == Approx(0.8485).epsilon(1e-4));
  const auto y2 = rmsnorm<double>(row({3, 4}), row({2, 2}), 0.0);
  CHECK(y2(0, 0) == Approx(1.6971).epsilon(1e-4));
  CHECK(y2(0, 1) == Approx(2.2627).epsilon(1e-4));
  CHECK_THROWS_AS(rmsnorm<double>(row({3, 4, 5}), row({1, 1}), 0.0), ShapeError);
}

TEST_CASE("rmsnorm output RMS equals gain RMS") {
  std::mt19937_64 rng(3);
  const Matrix<double> x = test::randn(7, 6, rng);
  const Matrix<double> g = test::randn(1, 6, rng);
  const Matrix<double> y = rmsnorm<double>(x, g, 0.0);
  const double g_rms = std::sqrt(g.squaredNorm() / 6.0);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const Matrix<double> unit = y.row(r).cwiseQuotient(g);
    CHECK(std::sqrt(unit.squaredNorm() / 6.0) == Approx(1.0).epsilon(1e-12));
  }
  const Matrix<double> yo = rmsnorm<double>(x, Matrix<double>::Ones(1, 6) * g_rms, 0.0);
  for (Eigen::Index r = 0; r < yo.rows(); ++r) CHECK(std::sqrt(yo.row(r).squaredNorm() / 6.0) == Approx(g_rms));
}

TEST_CASE("rope table layout") {
  CHECK_THROWS_AS(rope_build(6, 2, 2), std::invalid_argument);
  const auto t4 = rope_build(4, 2, 2);
  CHECK(t4.angles.rows() == 4);
  CHECK(t4.angles.cols() == 2);
  CHECK(t4.angles.row(0).isZero());
  // position (1, 0)
  CHECK(t4.angles(2, 0) == 1.0);
  CHECK(t4.angles(2, 1) == 0.0);

  const auto t8 = rope_build(8, 3, 5, 10000.0);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 5; ++c) {
      const int pos = r * 5 + c;
      for (int j = 0; j < 2; ++j) {
        const double freq = std::pow(10000.0, -2.0 * j / 4.0);
        CHECK(t8.angles(pos, j) == Approx(r * freq).epsilon(1e-15));
        CHECK(t8.angles(pos, 2 + j) == Approx(c * freq).epsilon(1e-15));
      }
    }
  }
}

TEST_CASE("rope rotation examples") {
  RopeTable t;
  t.head_dim = 4;
  t.grid_h = 1;
  t.grid_w = 2;
  t.angles.setZero(2, 2);
  t.angles(1, 0) = std::numbers::pi / 2;
  const std::vector<int> ids{1};
  const auto y = rope_rotate<double>(row({1, 0, 0.5, -2}), t, ids, false);
  CHECK(y(0, 0) == Approx(0.0).epsilon(1e-15));
  CHECK(y(0, 1) == Approx(1.0));
  CHECK(y(0, 2) == 0.5);
  CHECK(y(0, 3) == -2.0);

  std::mt19937_64 rng(4);
  const auto table = rope_build(8, 4, 4);
  const Matrix<double> v = test::randn(3, 16, rng);
  const std::vector<int> at0{0, 5, 15};
  const auto r = rope_rotate<double>(v, table, at0, false);
  CHECK(test::max_abs(r.row(0) - v.row(0)) == 0.0);
  CHECK(test::max_abs(r.row(1) - v.row(1)) > 1e-3);
  const auto skipped = rope_rotate<double>(v, table, std::vector<int>{9, 5, 15}, true);
  CHECK(test::max_abs(skipped.row(0) - v.row(0)) == 0.0);
  CHECK(test::max_abs(skipped.row(1) - r.row(1)) == 0.0);

  // per-pair norms survive rotation
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    for (Eigen::Index p = 0; p < 8; ++p) {
      CHECK(std::hypot(r(i, 2 * p), r(i, 2 * p + 1)) ==
            Approx(std::hypot(v(i, 2 * p), v(i, 2 * p + 1))).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(rope_rotate<double>(v, table, std::vector<int>{0, 16, 1}, false), std::out_of_range);
}

TEST_CASE("rope relative-position property over a 4x4 grid") {
  std::mt19937_64 rng(8);
  const auto table = rope_build(8, 4, 4);
  const Matrix<double> q = test::randn(1, 8, rng);
  const Matrix<double> k = test::randn(1, 8, rng);
  auto dot = [&](int m, int n) {
    return rope_rotate<double>(q, table, std::vector<int>{m}, false).row(0).dot(
        rope_rotate<double>(k, table, std::vector<int>{n}, false).row(0));
  };
  double worst = 0.0;
  for (int m = 0; m < 16; ++m) {
    for (int n = 0; n < 16; ++n) {
      const int dr = m / 4 - n / 4;
      const int dc = m % 4 - n % 4;
      // a reference pair with the same displacement
      const int mr = std::max(dr, 0), nr = std::max(-dr, 0);
      const int mc = std::max(dc, 0), nc = std::max(-dc, 0);
      worst = std::max(worst, std::abs(dot(m, n) - dot(mr * 4 + mc, nr * 4 + nc)));
    }
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("qk normalization") {
  ParamSet<double> ps;
  auto qn = make_rmsnorm(ps, "q", 2);
  auto kn = make_rmsnorm(ps, "k", 2);
  ag::Graph<double> g;
  Matrix<double> q(1, 4);
  q << 3, 4, 1, 1;
  auto [qo, ko] = qk_normalize(g, g.constant(q), g.constant(q * 10.0), qn, kn);
  CHECK(qo.value()(0, 0) == Approx(0.8485).epsilon(1e-4));
  CHECK(qo.value()(0, 1) == Approx(1.1314).epsilon(1e-4));
  CHECK(qo.value()(0, 2) == Approx(1.0).epsilon(1e-6));
  CHECK(test::max_abs(qo.value() - ko.value()) < 1e-6);
}

TEST_CASE("value residual mixing") {
  Matrix<double> a(1, 2), b(1, 2);
  a << 2, 0;
  b << 0, 2;
  const auto m = value_residual_mix<double>(a, b, 0.0);
  CHECK(m(0, 0) == 1.0);
  CHECK(m(0, 1) == 1.0);
  CHECK(test::max_abs(value_residual_mix<double>(a, b, -800.0) - b) == 0.0);
  CHECK(test::max_abs(value_residual_mix<double>(a, b, 800.0) - a) == 0.0);

  std::mt19937_64 rng(2);
  const Matrix<double> r = test::randn(4, 5, rng), c = test::randn(4, 5, rng);
  for (double raw : {-3.0, -0.2, 0.0, 1.7}) {
    const auto y = value_residual_mix<double>(r, c, raw);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      CHECK(y.data()[i] >= std::min(r.data()[i], c.data()[i]) - 1e-15);
      CHECK(y.data()[i] <= std::max(r.data()[i], c.data()[i]) + 1e-15);
    }
  }
  CHECK_THROWS_AS(value_residual_mix<double>(r, c.leftCols(3), 0.0), ShapeError);
}

TEST_CASE("attention against a hand-rolled softmax") {
  std::mt19937_64 rng(6);
  Matrix<double> v1 = test::randn(1, 4, rng);
  CHECK(test::max_abs(attention<double>(test::randn(1, 4, rng), test::randn(1, 4, rng), v1, 2) - v1) < 1e-15);

  // identical tokens attend equally
  Matrix<double> qk(2, 2);
  qk << 0.3, -0.7, 0.3, -0.7;
  Matrix<double> v(2, 2);
  v << 1, 2, 3, 4;
  const auto o = attention<double>(qk, qk, v, 1);
  CHECK(o(0, 0) == Approx(2.0));
  CHECK(o(1, 1) == Approx(3.0));

  const Matrix<double> q = test::randn(3, 4, rng), k = test::randn(3, 4, rng), vv = test::randn(3, 4, rng);
  const auto got = attention<double>(q, k, vv, 2);
  for (int h = 0; h < 2; ++h) {
    for (int i = 0; i < 3; ++i) {
      double w[3], z = 0.0;
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int c = 0; c < 2; ++c) s += q(i, 2 * h + c) * k(j, 2 * h + c);
        w[j] = std::exp(s / std::sqrt(2.0));
        z += w[j];
      }
      for (int c = 0; c < 2; ++c) {
        double ref = 0.0;
        for (int j = 0; j < 3; ++j) ref += w[j] / z * vv(j, 2 * h + c);
        CHECK(got(i, 2 * h + c) == Approx(ref).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("activation examples") {
  Matrix<double> x(1, 2);
  x << -1, 3;
  const auto r = activation_apply(Activation::kRelu2, x);
  CHECK(r(0, 0) == 0.0);
  CHECK(r(0, 1) == 9.0);
  Matrix<double> n(1, 2);
  n << -2, 3;
  const auto l = activation_apply(Activation::kLopsidedLeakyRelu2, n);
  CHECK(l(0, 0) == Approx(-0.02).epsilon(1e-15));
  CHECK(l(0, 1) == 9.0);
  Matrix<double> gx(1, 5);
  gx << -3, -0.5, 0, 0.7, 2.5;
  const auto ge = activation_apply(Activation::kGelu, gx);
  for (int i = 0; i < 5; ++i) {
    CHECK(ge(0, i) == Approx(0.5 * gx(0, i) * (1 + std::erf(gx(0, i) / std::sqrt(2.0)))).epsilon(1e-14));
  }
  CHECK(parse_activation("lopsided_leaky_relu2") == Activation::kLopsidedLeakyRelu2);
  CHECK_THROWS(parse_activation("xielu"));
}

TEST_CASE("ffn oracles") {
  std::mt19937_64 rng(12);
  {
    ParamSet<double> ps;
    auto f = make_ffn(ps, "f", Activation::kRelu2, 4, 4);
    for (auto& p : ps) {
      if (p.name.ends_with(".weight")) p.value = test::randn(p.value.rows(), p.value.cols(), rng);
    }
    ag::Graph<double> g;
    CHECK(ffn(g, g.constant(Matrix<double>::Zero(3, 4)), f).value().isZero());
    CHECK_FALSE(f.gate.has_value());
  }
  {
    ParamSet<double> ps;
    auto f = make_ffn(ps, "f", Activation::kGelu, 1, 1);
    ps.at("f.up.weight").value.setOnes();
    ps.at("f.down.weight").value.setOnes();
    Matrix<double> x(3, 1);
    x << -1.2, 0.1, 2.0;
    ag::Graph<double> g;
    const auto y = ffn(g, g.constant(x), f).value();
    for (int i = 0; i < 3; ++i) CHECK(y(i, 0) == Approx(gelu(x(i, 0))).epsilon(1e-14));
  }
  for (auto kind : {Activation::kGelu, Activation::kRelu2, Activation::kLopsidedLeakyRelu2, Activation::kSwiGlu}) {
    ParamSet<double> ps;
    auto f = make_ffn(ps, "f", kind, 4, 4);
    for (auto& p : ps) p.value = test::randn(p.value.rows(), p.value.cols(), rng, 0.5);
    CHECK(f.gate.has_value() == (kind == Activation::kSwiGlu));
    const Matrix<double> x = test::randn(2, 4, rng);
    ag::Graph<double> g;
    const auto y = ffn(g, g.constant(x), f).value();
    const Matrix<double> up = (x * ps.at("f.up.weight").value).rowwise() + Eigen::RowVectorXd(ps.at("f.up.bias").value);
    Matrix<double> hidden(up.rows(), up.cols());
    for (Eigen::Index i = 0; i < up.size(); ++i) {
      const double u = up.data()[i];
      switch (kind) {
        case Activation::kGelu: hidden.data()[i] = 0.5 * u * (1 + std::erf(u / std::sqrt(2.0))); break;
        case Activation::kRelu2: hidden.data()[i] = u > 0 ? u * u : 0.0; break;
        case Activation::kLopsidedLeakyRelu2: hidden.data()[i] = u > 0 ? u * u : 0.01 * u; break;
        case Activation::kSwiGlu: hidden.data()[i] = u; break;
      }
    }
    if (kind == Activation::kSwiGlu) {
      const Matrix<double> gate =
          (x * ps.at("f.gate.weight").value).rowwise() + Eigen::RowVectorXd(ps.at("f.gate.bias").value);
      for (Eigen::Index i = 0; i < hidden.size(); ++i) {
        const double a = gate.data()[i];
        hidden.data()[i] *= a / (1 + std::exp(-a));
      }
    }
    const Matrix<double> ref =
        (hidden * ps.at("f.down.weight").value).rowwise() + Eigen::RowVectorXd(ps.at("f.down.bias").value);
    CHECK(test::max_abs(y - ref) < 1e-12);
  }
  CHECK(ffn_hidden_width(Activation::kSwiGlu, 6, 4) == 16);
}

TEST_CASE("block gradients match finite differences") {
  std::mt19937_64 rng(21);
  SUBCASE("rmsnorm") {
    ParamSet<double> ps;
    auto n = make_rmsnorm(ps, "n", 3);
    auto& xin = ps.add("x", 4, 6);
    xin.value = test::randn(4, 6, rng);
    n.gain->value = test::randn(1, 3, rng);
    CHECK(test::grad_check(ps, [&](ag::Graph<double>& g) { return test::probe(rms_norm(g, g.param(xin), n), 1); }) <
          1e-6);
  }
  SUBCASE("rope and value residual") {
    ParamSet<double> ps;
    auto& x = ps.add("x", 6, 8);
    auto& ref = ps.add("ref", 6, 8);
    auto& lam = ps.add("lam", 1, 1);
    x.value = test::randn(6, 8, rng);
    ref.value = test::randn(6, 8, rng);
    lam.value(0, 0) = 0.4;
    const auto table = rope_build(4, 2, 2);
    const std::vector<int> ids{kNoRope, 0, 1, 3};
    const auto angles = rope_angles<double>(table, std::vector<int>{kNoRope, 0, 3}, true);
    CHECK(test::grad_check(ps, [&](ag::Graph<double>& g) {
            auto mixed = value_residual_mix(g.param(ref), g.param(x), g.param(lam));
            return test::probe(rope(mixed, angles), 2);
          }) < 1e-6);
  }
  SUBCASE("attention layer with every option") {
    ParamSet<double> ps;
    AttentionParams<double> p;
    p.n_heads = 2;
    p.head_dim = 4;
    p.q = make_linear(ps, "q", 8, 8);
    p.k = make_linear(ps, "k", 8, 8);
    p.v = make_linear(ps, "v", 8, 8);
    p.out = make_linear(ps, "o", 8, 8);
    p.q_norm = make_rmsnorm(ps, "qn", 4);
    p.k_norm = make_rmsnorm(ps, "kn", 4);
    p.lambda_raw = &ps.add("lam", 1, 1);
    auto& x = ps.add("x", 10, 8);
    auto& vref = ps.add("vref", 10, 8);
    for (auto& q : ps) q.value = test::randn(q.value.rows(), q.value.cols(), rng, 0.5);
    const auto table = rope_build(4, 2, 2);
    const auto angles = rope_angles<double>(table, std::vector<int>{kNoRope, 0, 1, 2, 3}, true);
    std::string worst;
    const double err = test::grad_check(
        ps,
        [&](ag::Graph<double>& g) {
          AttentionContext<double> ctx{5, &angles, g.param(vref)};
          return test::probe(attention_layer(g, g.param(x), p, ctx).first, 3);
        },
        &worst);
    INFO(worst);
    CHECK(err < 1e-6);
  }
  SUBCASE("ffn activations") {
    for (auto kind : {Activation::kGelu, Activation::kRelu2, Activation::kLopsidedLeakyRelu2, Activation::kSwiGlu}) {
      ParamSet<double> ps;
      auto f = make_ffn(ps, "f", kind, 4, 2);
      auto& x = ps.add("x", 3, 4);
      for (auto& q : ps) q.value = test::randn(q.value.rows(), q.value.cols(), rng, 0.7);
      CHECK(test::grad_check(ps, [&](ag::Graph<double>& g) { return test::probe(ffn(g, g.param(x), f), 4); }) < 1e-6);
    }
  }
}
