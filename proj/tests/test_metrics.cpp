#include "srdit/metrics.hpp"

#include "support.hpp"

using namespace srdit;
using namespace srdit::metrics;

namespace {

FeatureSet set(const Matrix<double>& v) { return {v, "test"}; }

}  // namespace

TEST_CASE("identical sets give exactly zero") {
  std::mt19937_64 rng(1);
  const auto a = set(test::randn(30, 5, rng));
  CHECK(kernel_distance(a, a) == 0.0);
  CHECK(kernel_distance(a, a, KernelSpec::rbf()) == 0.0);
}

TEST_CASE("unequal sizes match a hand-expanded double sum") {
  // 1-D, polynomial kernel (x y + 1)^3 with feature width 1
  auto k = [](double x, double y) { return std::pow(x * y + 1.0, 3); };
  const double a[3] = {0.2, -0.5, 1.1};
  const double b[2] = {0.4, -0.9};
  const double aa = 2 * (k(a[0], a[1]) + k(a[0], a[2]) + k(a[1], a[2])) / 6.0;
  const double bb = 2 * k(b[0], b[1]) / 2.0;
  const double ab = (k(a[0], b[0]) + k(a[0], b[1]) + k(a[1], b[0]) + k(a[1], b[1]) + k(a[2], b[0]) + k(a[2], b[1])) / 6.0;
  Matrix<double> ma(3, 1), mb(2, 1);
  ma << a[0], a[1], a[2];
  mb << b[0], b[1];
  CHECK(std::abs(kernel_distance(set(ma), set(mb)) - (aa + bb - 2 * ab)) <= 1e-12);
}

TEST_CASE("separated clusters are farther than same-distribution sets") {
  std::mt19937_64 rng(2);
  const auto a = set(test::randn(40, 4, rng));
  const auto same = set(test::randn(40, 4, rng));
  Matrix<double> far = test::randn(40, 4, rng);
  far.array() += 4.0;
  const double d_same = kernel_distance(a, same);
  const double d_far = kernel_distance(a, set(far));
  CHECK(d_far > 0.0);
  CHECK(d_far > d_same);
  CHECK(kernel_distance(a, set(far), KernelSpec::rbf()) > kernel_distance(a, same, KernelSpec::rbf()));
}

TEST_CASE("kernel distance errors") {
  std::mt19937_64 rng(3);
  const auto a = set(test::randn(5, 3, rng));
  CHECK_THROWS_AS(kernel_distance(a, FeatureSet{a.values, "other"}), std::invalid_argument);
  CHECK_THROWS_AS(kernel_distance(a, set(test::randn(1, 3, rng))), std::invalid_argument);
  CHECK_THROWS_AS(kernel_distance(a, set(test::randn(5, 2, rng))), ShapeError);
}

TEST_CASE("feature extraction") {
  const auto enc = losses::FrozenEncoder::create(2, 3, 4, 9);
  std::mt19937_64 rng(4);
  const Matrix<double> lat = test::randn(2, 6, rng);
  const auto f = extract_features<double>(lat, enc);
  CHECK(f.values == extract_features<double>(lat, enc).values);
  CHECK(extract_features<double>(Matrix<double>::Zero(2, 6), enc).values.isZero());
  for (int s = 0; s < 2; ++s) {
    Matrix<double> pooled = Matrix<double>::Zero(1, 4);
    for (int p = 0; p < 3; ++p) {
      Matrix<double> tok(1, 2);
      tok << lat(s, p), lat(s, 3 + p);
      pooled += tok * enc.token_proj() / 3.0;
    }
    CHECK(test::max_abs(f.values.row(s) - pooled) < 1e-14);
  }
}

TEST_CASE("FLOP accounting") {
  model::ModelConfig c;
  c.drop_ratio = 0.0;
  CHECK(flops_estimate(c, true).total == flops_estimate(c, false).total);
  for (double r : {0.1, 0.5, 0.75, 0.9}) {
    c.drop_ratio = r;
    CHECK(flops_estimate(c, true).total < flops_estimate(c, false).total);
  }

  // N = 256 patches, no class token: 64 kept
  model::ModelConfig n;
  n.grid_h = n.grid_w = 16;
  n.reg = false;
  n.drop_ratio = 0.75;
  const auto dense = flops_estimate(n, false);
  const auto routed = flops_estimate(n, true);
  CHECK(routed.blocks[2].tokens == 64);
  CHECK(routed.blocks[2].attention_scores / dense.blocks[2].attention_scores ==
        doctest::Approx((64.0 / 256) * (64.0 / 256)).epsilon(1e-15));
  CHECK(dense.mid_total / routed.mid_total >= 3.5);
  CHECK(routed.blocks[0].total() == dense.blocks[0].total());

  // with the class token in the sequence it counts toward the kept budget
  n.reg = true;
  CHECK(flops_estimate(n, true).blocks[2].tokens == 64);
  CHECK(flops_estimate(n, false).blocks[2].tokens == 257);

  const auto b = block_flops(n, 10);
  const double d = n.width;
  CHECK(b.attention_proj == 4 * 10 * d * d);
  CHECK(b.attention_scores == 2 * 100 * d);
  CHECK(b.ffn == 2 * 10 * d * 4 * d);
}
