#include "srdit/routing.hpp"

#include "support.hpp"

#include <algorithm>
#include <set>

using namespace srdit;
using namespace srdit::routing;

TEST_CASE("route plan budget and invariants") {
  std::mt19937_64 rng(1);
  const auto id = make_route_plan(8, 0.0, rng, false);
  CHECK(id.kept == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
  CHECK(id.is_identity());
  CHECK(make_route_plan(16, 0.75, rng, false).n_kept() == 4);

  for (int n : {5, 16, 65, 257}) {
    for (double r : {0.25, 0.5, 0.75}) {
      for (bool cls : {false, true}) {
        const auto p = make_route_plan(n, r, rng, cls);
        CHECK(p.n_kept() == static_cast<int>(std::lround(n * (1 - r))));
        CHECK(std::is_sorted(p.kept.begin(), p.kept.end()));
        CHECK(std::set<int>(p.kept.begin(), p.kept.end()).size() == p.kept.size());
        CHECK(p.kept.back() < n);
        if (cls) CHECK(p.kept.front() == 0);
      }
    }
  }
  std::mt19937_64 a(42), b(42);
  CHECK(make_route_plan(8, 0.5, a, false).kept == make_route_plan(8, 0.5, b, false).kept);

  CHECK_THROWS_AS(make_route_plan(2, 0.9, rng, false), std::invalid_argument);
  CHECK_THROWS_AS(make_route_plan(8, 1.0, rng, false), std::invalid_argument);
  CHECK_THROWS_AS(make_route_plan(8, -0.1, rng, false), std::invalid_argument);
}

TEST_CASE("kept indices are uniform over non-CLS tokens") {
  std::mt19937_64 rng(3);
  const int trials = 20000;
  std::vector<int> hits(9, 0);
  for (int i = 0; i < trials; ++i) {
    for (int k : make_route_plan(9, 0.5, rng, true).kept) ++hits[static_cast<std::size_t>(k)];
  }
  CHECK(hits[0] == trials);
  // 4 more slots among 8 tokens: p = 0.5 each, sd of the count ~ 71
  for (int k = 1; k < 9; ++k) CHECK(std::abs(hits[static_cast<std::size_t>(k)] - trials / 2) < 5 * 71);
}

TEST_CASE("gather and pad") {
  Matrix<double> seq(4, 2);
  seq << 0, 0.5, 1, 1.5, 2, 2.5, 3, 3.5;
  RoutePlan p;
  p.n_tokens = 4;
  p.kept = {1, 3};
  auto [sparse, ids] = gather_tokens<double>(seq, p, false);
  CHECK(sparse.rows() == 2);
  CHECK(sparse(0, 0) == 1.0);
  CHECK(sparse(1, 1) == 3.5);
  CHECK(ids == std::vector<int>{1, 3});

  Matrix<double> mask(1, 2);
  mask << -9, -8;
  const auto padded = pad_with_mask<double>(sparse, p, mask);
  CHECK(padded.row(0) == mask);
  CHECK(padded.row(1) == seq.row(1));
  CHECK(padded.row(2) == mask);
  CHECK(padded.row(3) == seq.row(3));
  CHECK(pad_with_mask<double>(sparse, p, Matrix<double>::Zero(1, 2)).row(0).isZero());

  const auto idp = identity_plan(4);
  CHECK(gather_tokens<double>(seq, idp, false).first == seq);
  CHECK(pad_with_mask<double>(seq, idp, mask) == seq);

  CHECK_THROWS_AS(gather_tokens<double>(seq.topRows(3), p, false), ShapeError);
  CHECK_THROWS_AS(pad_with_mask<double>(seq.topRows(3), p, mask), ShapeError);
}

TEST_CASE("rope ids carry the CLS sentinel") {
  RoutePlan p;
  p.n_tokens = 6;
  p.kept = {0, 2, 5};
  CHECK(rope_ids(p, true) == std::vector<int>{blocks::kNoRope, 1, 4});
  CHECK(rope_ids(p, false) == std::vector<int>{0, 2, 5});
}

TEST_CASE("gathered tokens rotate as in the dense pass") {
  std::mt19937_64 rng(5);
  const auto table = blocks::rope_build(8, 3, 3);
  const Matrix<double> seq = test::randn(10, 8, rng);  // CLS + 9 patches
  std::vector<int> dense_ids{blocks::kNoRope};
  for (int i = 0; i < 9; ++i) dense_ids.push_back(i);
  const auto dense = blocks::rope_rotate<double>(seq, table, dense_ids, true);
  const auto plan = make_route_plan(10, 0.6, rng, true);
  auto [sparse, ids] = gather_tokens<double>(seq, plan, true);
  const auto rotated = blocks::rope_rotate<double>(sparse, table, ids, true);
  for (int i = 0; i < plan.n_kept(); ++i) {
    CHECK(test::max_abs(rotated.row(i) - dense.row(plan.kept[static_cast<std::size_t>(i)])) <= 1e-6);
  }
}

TEST_CASE("batched gather/pad round trip is bit-exact") {
  std::mt19937_64 rng(8);
  const int L = 7, B = 3;
  const auto plan = make_route_plan(L, 0.5, rng, true);
  ag::Graph<double> g;
  const Matrix<double> x = test::randn(B * L, 4, rng);
  auto sparse = gather_tokens(g.constant(x), plan);
  CHECK(sparse.rows() == B * plan.n_kept());
  auto full = pad_with_mask(sparse, plan, g.constant(Matrix<double>::Zero(1, 4)));
  for (int s = 0; s < B; ++s) {
    for (int t = 0; t < L; ++t) {
      const bool kept = std::find(plan.kept.begin(), plan.kept.end(), t) != plan.kept.end();
      if (kept) {
        CHECK(full.value().row(s * L + t) == x.row(s * L + t));
      } else {
        CHECK(full.value().row(s * L + t).isZero());
      }
    }
  }
}

TEST_CASE("fusion projection") {
  std::mt19937_64 rng(9);
  const int d = 3;
  ParamSet<double> ps;
  auto f = make_fusion(ps, "fuse", d);
  ag::Graph<double> g;
  const Matrix<double> dense = test::randn(2, d, rng), padded = test::randn(2, d, rng);
  auto run = [&] { return fuse_streams(g, g.constant(dense), g.constant(padded), f).value(); };

  auto& w = ps.at("fuse.weight").value;
  w.setZero();
  w.topRows(d).setIdentity();
  CHECK(run() == dense);
  w.setZero();
  w.bottomRows(d).setIdentity();
  CHECK(run() == padded);

  w = test::randn(2 * d, d, rng);
  ps.at("fuse.bias").value = test::randn(1, d, rng);
  Matrix<double> ref(2, d);
  for (int t = 0; t < 2; ++t) {
    for (int o = 0; o < d; ++o) {
      double s = ps.at("fuse.bias").value(0, o);
      for (int i = 0; i < d; ++i) s += dense(t, i) * w(i, o) + padded(t, i) * w(d + i, o);
      ref(t, o) = s;
    }
  }
  CHECK(test::max_abs(run() - ref) < 1e-14);
  CHECK_THROWS_AS(fuse_streams(g, g.constant(dense), g.constant(padded.leftCols(2)), f), ShapeError);
}

TEST_CASE("routing gradients") {
  std::mt19937_64 rng(10);
  ParamSet<double> ps;
  auto f = make_fusion(ps, "fuse", 4);
  auto& x = ps.add("x", 2 * 6, 4);
  auto& mask = ps.add("mask", 1, 4);
  for (auto& p : ps) p.value = test::randn(p.value.rows(), p.value.cols(), rng);
  const auto plan = make_route_plan(6, 0.5, rng, true);
  CHECK(test::grad_check(ps, [&](ag::Graph<double>& g) {
          auto dense = g.param(x);
          auto sq = ag::square(gather_tokens(dense, plan));
          return test::probe(fuse_streams(g, dense, pad_with_mask(sq, plan, g.param(mask)), f), 7);
        }) < 1e-6);
}
