#include "srdit/checks.hpp"

#include "srdit/checkpoint.hpp"
#include "srdit/dataset.hpp"
#include "srdit/evaluate.hpp"
#include "srdit/metrics.hpp"
#include "srdit/sampler.hpp"
#include "srdit/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace srdit::checks {
namespace {

// Tolerances and budgets.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradFdStep = 1e-6;
constexpr double kGradBudgetSeconds = 60.0;
constexpr double kRouteTol = 1e-6;
constexpr int kRouteSeeds = 20;
constexpr int kShiftDraws = 10000;
constexpr double kRopeTol = 1e-6;
constexpr double kLossTol = 1e-6;
constexpr double kKernelOracleTol = 1e-12;
constexpr double kToyRatioLimit = 0.25;
constexpr double kToyBudgetSeconds = 600.0;
constexpr int kToyWindow = 100;
constexpr double kFlopRatioFloor = 2.5;

using Clock = std::chrono::steady_clock;

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

CheckResult timed(int id, const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
  CheckResult r;
  r.id = id;
  r.name = name;
  const auto t0 = Clock::now();
  try {
    std::tie(r.passed, r.detail) = body();
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("error: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return r;
}

template <typename T>
void randomize(ParamSet<T>& ps, double stddev, std::mt19937_64& rng) {
  for (auto& p : ps) {
    if (p.trainable) init::normal(p, stddev, rng);
  }
}

// Small model with every feature switched on.
model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.grid_h = 2;
  c.grid_w = 2;
  c.latent_channels = 2;
  c.width = 8;
  c.n_heads = 1;
  c.n_dense_pre = 1;
  c.n_mid = 1;
  c.n_dense_post = 1;
  c.drop_ratio = 0.5;
  c.repa_tap_block = 1;
  c.n_classes = 2;
  c.feature_width = 4;
  c.projector_hidden = 8;
  return c;
}

model::ModelConfig small_config() {
  model::ModelConfig c;
  c.grid_h = 4;
  c.grid_w = 4;
  c.width = 16;
  c.n_heads = 2;
  c.n_dense_pre = 1;
  c.n_mid = 1;
  c.n_dense_post = 1;
  c.feature_width = 8;
  c.projector_hidden = 16;
  return c;
}

}  // namespace

std::string CheckResult::line() const {
  char secs[32];
  std::snprintf(secs, sizeof secs, "%.2fs", seconds);
  return std::string(passed ? "[PASS] " : "[FAIL] ") + std::to_string(id) + " " + name + ": " + detail + " (" + secs +
         ")";
}

CheckResult gradient_oracle() {
  return timed(1, "gradient oracle", [] {
    using harness::derive_rng;
    const auto t0 = Clock::now();
    const model::ModelConfig cfg = tiny_config();
    model::Model<double> m(cfg, 11);
    auto rng = derive_rng(11, {1});
    randomize(m.params(), 0.4, rng);

    harness::DatasetSpec spec;
    spec.n_classes = cfg.n_classes;
    harness::SyntheticDataset data(spec, cfg, 12);
    auto batch = data.sample<double>(2, rng);
    harness::StepOptions opt{{schedule::PathKind::kLinear, cfg.latent_dim(), true}, 0.0, true};
    auto inputs = harness::prepare_step<double>(m, batch, opt, rng);
    inputs.labels[1] = model::kNullClass;
    if (!inputs.plan || inputs.plan->is_identity()) throw std::logic_error("gradient oracle: expected a routed plan");
    const losses::LossWeights w;

    auto loss = [&] {
      ag::Graph<double> g;
      g.set_grad_enabled(false);
      return harness::build_losses<double>(m, g, inputs, w).total.scalar();
    };

    {
      ag::Graph<double> g;
      auto sg = harness::build_losses<double>(m, g, inputs, w);
      m.params().zero_grad();
      g.backward(sg.total);
    }

    double worst = 0.0;
    std::string worst_name;
    std::size_t checked = 0;
    for (auto& p : m.params()) {
      if (!p.trainable) continue;
      Matrix<double> numeric(p.value.rows(), p.value.cols());
      for (Eigen::Index i = 0; i < p.value.size(); ++i) {
        double& x = p.value.data()[i];
        const double x0 = x;
        x = x0 + kGradFdStep;
        const double up = loss();
        x = x0 - kGradFdStep;
        const double down = loss();
        x = x0;
        numeric.data()[i] = (up - down) / (2.0 * kGradFdStep);
      }
      const Matrix<double> analytic = p.grad.size() == 0 ? Matrix<double>::Zero(p.value.rows(), p.value.cols()) : p.grad;
      const double denom = analytic.norm() + numeric.norm();
      const double rel = denom == 0.0 ? 0.0 : (analytic - numeric).norm() / denom;
      if (rel >= worst) {
        worst = rel;
        worst_name = p.name;
      }
      checked += static_cast<std::size_t>(p.value.size());
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    const bool ok = worst < kGradRelTol && secs < kGradBudgetSeconds;
    return std::pair{ok, std::to_string(checked) + " parameters, worst relative error " + fmt("%.3g", worst) + " (" +
                             worst_name + "), limit " + fmt("%.0e", kGradRelTol) + ", budget " +
                             fmt("%.0f", kGradBudgetSeconds) + "s"};
  });
}

CheckResult routing_equivalence() {
  return timed(2, "routed/unrouted equivalence", [] {
    double worst = 0.0;
    for (int seed = 0; seed < kRouteSeeds; ++seed) {
      model::ModelConfig cfg = small_config();
      cfg.drop_ratio = 0.0;
      model::Model<float> m(cfg, static_cast<std::uint64_t>(seed));
      auto rng = harness::derive_rng(static_cast<std::uint64_t>(seed), {2});
      randomize(m.params(), 0.2, rng);
      const int B = 2;
      Matrix<float> x = sampler::initial_noise<float>(B * cfg.patch_tokens(), cfg.latent_channels, rng);
      Matrix<float> cls = sampler::initial_noise<float>(B, cfg.width, rng);
      const std::vector<double> t{0.3, 0.8};
      const std::vector<int> labels{1, model::kNullClass};
      const auto plan = routing::make_route_plan(cfg.seq_len(), cfg.drop_ratio, rng, cfg.reg);
      if (!plan.is_identity()) return std::pair{false, std::string("drop 0 produced a non-identity plan")};

      auto run = [&](const routing::RoutePlan* p) {
        ag::Graph<float> g;
        g.set_grad_enabled(false);
        typename model::Model<float>::ForwardInputs in;
        in.x_tokens = &x;
        in.t = t;
        in.labels = labels;
        in.cls_noised = &cls;
        in.plan = p;
        auto out = m.forward(g, in);
        return std::pair{Matrix<float>(out.velocity.value()), Matrix<float>(out.cls_velocity.value())};
      };
      const auto dense = run(nullptr);
      const auto routed = run(&plan);
      worst = std::max(worst, static_cast<double>((dense.first - routed.first).cwiseAbs().maxCoeff()));
      worst = std::max(worst, static_cast<double>((dense.second - routed.second).cwiseAbs().maxCoeff()));
    }
    return std::pair{worst <= kRouteTol, std::to_string(kRouteSeeds) + " seeds, max |dense - routed| " +
                                             fmt("%.3g", worst) + ", limit " + fmt("%.0e", kRouteTol)};
  });
}

CheckResult time_shift_suite() {
  return timed(3, "time-shift suite", [] {
    double identity_err = 0.0;
    for (int i = 0; i <= 100; ++i) {
      const double t = i / 100.0;
      identity_err = std::max(identity_err, std::abs(schedule::time_shift(t, 4096.0) - t));
    }
    const double mid = schedule::time_shift(0.5, 16384.0);
    const bool exact = mid == 2.0 / 3.0;

    std::mt19937_64 rng(2024);
    const schedule::PathSchedule sch{schedule::PathKind::kLinear, 16384, true};
    const auto ts = schedule::sample_timesteps(kShiftDraws, rng, sch);
    double mean = 0.0;
    for (double t : ts) mean += t;
    mean /= kShiftDraws;
    double var = 0.0;
    for (double t : ts) var += (t - mean) * (t - mean);
    var /= kShiftDraws - 1;
    const double se = std::sqrt(var / kShiftDraws);
    const bool shifted = mean > 0.5 + 3.0 * se;
    const bool ok = identity_err == 0.0 && exact && shifted;
    return std::pair{ok, "identity err " + fmt("%.3g", identity_err) + ", t'(0.5, 16384) = " + fmt("%.17g", mid) +
                             (exact ? " (== 2/3)" : " (!= 2/3)") + ", MC mean " + fmt("%.4f", mean) + " vs 0.5 + 3se " +
                             fmt("%.4f", 0.5 + 3.0 * se)};
  });
}

CheckResult rope_suite() {
  return timed(4, "RoPE suite", [] {
    const int head_dim = 8;
    const int H = 4;
    const int W = 4;
    const auto table = blocks::rope_build(head_dim, H, W);
    std::mt19937_64 rng(7);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto random_rows = [&](Eigen::Index n, Eigen::Index cols) {
      Matrix<double> m(n, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
      return m;
    };

    // Norm preservation, two heads per token.
    std::vector<int> ids(H * W);
    for (int i = 0; i < H * W; ++i) ids[static_cast<std::size_t>(i)] = i;
    const Matrix<double> v = random_rows(H * W, 2 * head_dim);
    const Matrix<double> rv = blocks::rope_rotate<double>(v, table, ids, false);
    const double norm_err = (v.rowwise().norm() - rv.rowwise().norm()).cwiseAbs().maxCoeff();

    // Relative position: per axis, with q and k supported on that axis' pairs.
    auto rotated_at = [&](const Matrix<double>& vec, int pos) {
      const std::vector<int> one{pos};
      return Matrix<double>(blocks::rope_rotate<double>(vec, table, one, false));
    };
    double rel_err = 0.0;
    for (int axis = 0; axis < 2; ++axis) {
      Matrix<double> q = random_rows(1, head_dim);
      Matrix<double> k = random_rows(1, head_dim);
      const int half = head_dim / 2;
      for (int c = 0; c < head_dim; ++c) {
        const bool on_axis = axis == 0 ? c < half : c >= half;
        if (!on_axis) q(0, c) = k(0, c) = 0.0;
      }
      auto flat = [&](int coord, int other) { return axis == 0 ? coord * W + other : other * W + coord; };
      for (int m1 = 0; m1 < H * W; ++m1) {
        for (int n1 = 0; n1 < H * W; ++n1) {
          const int cm = axis == 0 ? m1 / W : m1 % W;
          const int cn = axis == 0 ? n1 / W : n1 % W;
          const int diff = cm - cn;
          const double dot = rotated_at(q, m1).row(0).dot(rotated_at(k, n1).row(0));
          const int ref_m = diff >= 0 ? flat(diff, 0) : flat(0, 0);
          const int ref_n = diff >= 0 ? flat(0, 0) : flat(-diff, 0);
          const double ref = rotated_at(q, ref_m).row(0).dot(rotated_at(k, ref_n).row(0));
          rel_err = std::max(rel_err, std::abs(dot - ref));
        }
      }
    }

    // CLS exclusion: the slot's rope id must not change the model output.
    model::ModelConfig cfg = small_config();
    cfg.grid_h = H;
    cfg.grid_w = W;
    model::Model<double> m(cfg, 3);
    randomize(m.params(), 0.2, rng);
    const Matrix<double> x = random_rows(2 * cfg.patch_tokens(), cfg.latent_channels);
    const Matrix<double> cls = random_rows(2, cfg.width);
    const std::vector<double> t{0.4, 0.7};
    const std::vector<int> labels{0, 1};
    const auto plan = routing::make_route_plan(cfg.seq_len(), cfg.drop_ratio, rng, true);
    double cls_diff = 0.0;
    for (const routing::RoutePlan* p : {static_cast<const routing::RoutePlan*>(nullptr), &plan}) {
      auto run = [&](int cls_id) {
        ag::Graph<double> g;
        g.set_grad_enabled(false);
        typename model::Model<double>::ForwardInputs in;
        in.x_tokens = &x;
        in.t = t;
        in.labels = labels;
        in.cls_noised = &cls;
        in.plan = p;
        in.cls_rope_id = cls_id;
        auto out = m.forward(g, in);
        return std::pair{Matrix<double>(out.velocity.value()), Matrix<double>(out.cls_velocity.value())};
      };
      const auto base = run(blocks::kNoRope);
      const auto moved = run(H * W - 1);
      cls_diff = std::max(cls_diff, (base.first - moved.first).cwiseAbs().maxCoeff());
      cls_diff = std::max(cls_diff, (base.second - moved.second).cwiseAbs().maxCoeff());
    }
    // Without the exclusion the same perturbation does move token 0.
    const Matrix<double> probe = random_rows(1, head_dim);
    const std::vector<int> far{H * W - 1};
    const double unskipped = (blocks::rope_rotate<double>(probe, table, far, false) - probe).cwiseAbs().maxCoeff();
    const double skipped = (blocks::rope_rotate<double>(probe, table, far, true) - probe).cwiseAbs().maxCoeff();

    const bool ok = norm_err <= kRopeTol && rel_err <= kRopeTol && cls_diff == 0.0 && skipped == 0.0 && unskipped > 1e-3;
    return std::pair{ok, "norm err " + fmt("%.3g", norm_err) + ", relative-position err " + fmt("%.3g", rel_err) +
                             ", CLS perturbation output diff " + fmt("%.3g", cls_diff) + " (unexcluded rotation moves " +
                             fmt("%.3g", unskipped) + ")"};
  });
}

CheckResult loss_oracles() {
  return timed(5, "loss-formula oracles", [] {
    losses::LossWeights w;
    std::mt19937_64 rng(5);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int rows_per_sample = 4;
    const int B = 3;
    Matrix<double> target(B * rows_per_sample, 3);
    for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] = normal(rng);
    const Matrix<double> pred = target.array() + 1.0;
    const std::vector<double> t{0.2, 0.5, 0.9};

    const double cfm = losses::cfm_loss<double>(pred, target, w, t, rows_per_sample);
    const double cfm_err = std::abs(cfm - (-0.05));

    losses::LossWeights tw = w;
    tw.cfm_mode = losses::CfmMode::kTcfm;
    double tcfm_err = 0.0;
    for (int s = 0; s < B; ++s) {
      const std::vector<double> ts{t[static_cast<std::size_t>(s)]};
      const double v = losses::cfm_loss<double>(pred.middleRows(s * rows_per_sample, rows_per_sample),
                                                target.middleRows(s * rows_per_sample, rows_per_sample), tw, ts,
                                                rows_per_sample);
      tcfm_err = std::max(tcfm_err, std::abs(v - (-ts[0] * 0.10)));
    }

    const double total = losses::total_loss({1.0, -1.0, 1.0, -0.05}, w).total;
    const double total_err = std::abs(total - 0.48);

    double repa_lo = 0.0;
    double repa_hi = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      Matrix<double> a(5, 4);
      Matrix<double> b(5, 4);
      for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = normal(rng);
      for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = normal(rng);
      if (trial == 0) b = a;
      if (trial == 1) b = -a;
      const double r = losses::repa_loss<double>(a, b);
      repa_lo = std::min(repa_lo, r);
      repa_hi = std::max(repa_hi, r);
    }
    const bool repa_ok = repa_lo >= -1.0 - kLossTol && repa_hi <= 1.0 + kLossTol &&
                         std::abs(repa_lo + 1.0) <= kLossTol && std::abs(repa_hi - 1.0) <= kLossTol;
    const bool ok = cfm_err <= kLossTol && tcfm_err <= kLossTol && total_err <= kLossTol && repa_ok;
    return std::pair{ok, "cfm " + fmt("%.9g", cfm) + ", tcfm max err " + fmt("%.3g", tcfm_err) + ", total " +
                             fmt("%.9g", total) + ", repa range [" + fmt("%.6f", repa_lo) + ", " +
                             fmt("%.6f", repa_hi) + "]"};
  });
}

namespace {

// Forwards to a model and records the t of every call per branch.
class CountingField final : public sampler::VelocityField<float> {
 public:
  explicit CountingField(model::Model<float>& m) : inner_(m) {}
  [[nodiscard]] int state_dim() const override { return inner_.state_dim(); }
  Matrix<float> conditional(const Matrix<float>& s, std::span<const double> t, std::span<const int> y) override {
    cond.push_back(t[0]);
    return inner_.conditional(s, t, y);
  }
  Matrix<float> unconditional(const Matrix<float>& s, std::span<const double> t) override {
    uncond.push_back(t[0]);
    return inner_.unconditional(s, t);
  }
  Matrix<float> weak(const Matrix<float>& s, std::span<const double> t) override {
    weak_calls.push_back(t[0]);
    return inner_.weak(s, t);
  }
  std::vector<double> cond, uncond, weak_calls;

 private:
  sampler::ModelField<float> inner_;
};

}  // namespace

CheckResult guidance_collapse() {
  return timed(6, "guidance collapse", [] {
    const model::ModelConfig cfg = small_config();
    model::Model<float> m(cfg, 21);
    auto rng = harness::derive_rng(21, {6});
    randomize(m.params(), 0.2, rng);
    const schedule::PathSchedule sch{schedule::PathKind::kLinear, cfg.latent_dim(), true};
    const std::vector<int> labels{0, 1, 2, 3};
    const int nfe = 20;

    auto run = [&](sampler::GuidanceConfig gc, CountingField* counter) {
      std::mt19937_64 r(99);
      sampler::ModelField<float> plain(m);
      sampler::VelocityField<float>& field = counter != nullptr ? static_cast<sampler::VelocityField<float>&>(*counter)
                                                                : plain;
      return sampler::euler_sample<float>(field, labels, nfe, gc, sch, r);
    };
    const Matrix<float> base = run({}, nullptr);
    bool identical = true;
    for (auto mode : {sampler::GuidanceMode::kCfg, sampler::GuidanceMode::kPdg}) {
      sampler::GuidanceConfig gc;
      gc.mode = mode;
      gc.scale = 1.0;
      const Matrix<float> out = run(gc, nullptr);
      identical = identical && out.rows() == base.rows() &&
                  std::memcmp(out.data(), base.data(), sizeof(float) * static_cast<std::size_t>(base.size())) == 0;
    }

    // Expected guided knots from the closed-form shifted grid.
    const double s = std::sqrt(cfg.latent_dim() / 4096.0);
    int expected = 0;
    for (int k = 0; k < nfe; ++k) {
      const double u = static_cast<double>(nfe - k) / nfe;
      const double tk = k == 0 ? 1.0 : s * u / (1.0 + (s - 1.0) * u);
      if (tk >= 0.10 && tk <= 0.80) ++expected;
    }
    bool counts_ok = expected > 0 && expected < nfe;
    std::string counts;
    for (auto mode : {sampler::GuidanceMode::kCfg, sampler::GuidanceMode::kPdg}) {
      sampler::GuidanceConfig gc;
      gc.mode = mode;
      gc.scale = 2.5;
      CountingField counter(m);
      const Matrix<float> out = run(gc, &counter);
      const auto& extra = mode == sampler::GuidanceMode::kCfg ? counter.uncond : counter.weak_calls;
      const auto& other = mode == sampler::GuidanceMode::kCfg ? counter.weak_calls : counter.uncond;
      bool inside = true;
      for (double t : extra) inside = inside && t >= 0.10 && t <= 0.80;
      const bool changed = (out - base).cwiseAbs().maxCoeff() > 0.0f;
      counts_ok = counts_ok && inside && other.empty() && static_cast<int>(extra.size()) == expected &&
                  static_cast<int>(counter.cond.size()) == nfe && changed;
      counts += sampler::to_string(mode) + " " + std::to_string(extra.size()) + "/" + std::to_string(counter.cond.size()) +
                " ";
    }
    return std::pair{identical && counts_ok, std::string("s=1 ") + (identical ? "bit-identical" : "DIFFERS") +
                                                 "; s=2.5 guided calls " + counts + "(expected " +
                                                 std::to_string(expected) + " inside [0.10, 0.80])"};
  });
}

CheckResult kernel_distance_oracles() {
  return timed(7, "kernel distance", [] {
    std::mt19937_64 rng(77);
    std::normal_distribution<double> normal(0.0, 1.0);
    metrics::FeatureSet a{Matrix<double>(20, 4), "test"};
    for (Eigen::Index i = 0; i < a.values.size(); ++i) a.values.data()[i] = normal(rng);
    const double same = metrics::kernel_distance(a, a);

    // 1-D, k(x, y) = (x y + 1)^3 written out term by term.
    const double a1 = 0.1, a2 = -0.4, a3 = 0.7;
    const double b1 = 0.3, b2 = 0.9, b3 = -0.2;
    auto k = [](double x, double y) { return (x * y + 1.0) * (x * y + 1.0) * (x * y + 1.0); };
    const double kaa = 2.0 * (k(a1, a2) + k(a1, a3) + k(a2, a3));
    const double kbb = 2.0 * (k(b1, b2) + k(b1, b3) + k(b2, b3));
    const double kab = k(a1, b2) + k(a1, b3) + k(a2, b1) + k(a2, b3) + k(a3, b1) + k(a3, b2);
    const double oracle = (kaa + kbb - 2.0 * kab) / 6.0;
    metrics::FeatureSet pa{Matrix<double>(3, 1), "test"};
    metrics::FeatureSet pb{Matrix<double>(3, 1), "test"};
    pa.values << a1, a2, a3;
    pb.values << b1, b2, b3;
    const double got = metrics::kernel_distance(pa, pb);
    const double oracle_err = std::abs(got - oracle);

    metrics::FeatureSet far{Matrix<double>(20, 4), "test"};
    for (Eigen::Index i = 0; i < far.values.size(); ++i) far.values.data()[i] = 5.0 + normal(rng);
    const double apart = metrics::kernel_distance(a, far);
    const bool ok = same == 0.0 && oracle_err <= kKernelOracleTol && apart > 0.0 && apart > same;
    return std::pair{ok, "identical " + fmt("%.3g", same) + ", 3-point oracle err " + fmt("%.3g", oracle_err) +
                             ", separated clusters " + fmt("%.6g", apart)};
  });
}

CheckResult toy_convergence(const std::string& work_dir) {
  return timed(8, "toy convergence", [&] {
    const auto t0 = Clock::now();
    harness::RunConfig cfg;
    cfg.steps = 2000;
    cfg.batch_size = 64;
    cfg.seed = 0;
    auto data = harness::generate_dataset(cfg.data, cfg.model, cfg.seed);
    auto state = harness::init_state(cfg);
    std::filesystem::create_directories(work_dir);
    std::ofstream log(std::filesystem::path(work_dir) / "toy_loss_log.csv");
    log << harness::loss_log_header() << '\n';
    std::vector<double> window_means;
    double acc = 0.0;
    harness::train(state, data, cfg.steps, [&](const harness::LogRow& row) {
      log << harness::loss_log_line(row) << '\n';
      acc += row.loss.velocity;
      if (row.step % kToyWindow == 0) {
        window_means.push_back(acc / kToyWindow);
        acc = 0.0;
      }
    });
    const auto report = harness::evaluate(state, data, 256, cfg.nfe, {}, cfg.seed);
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();

    int rises = 0;
    for (std::size_t i = 1; i < window_means.size(); ++i) {
      if (window_means[i] > window_means[i - 1]) ++rises;
    }
    const bool ok = report.ratio() < kToyRatioLimit && rises == 0 && secs < kToyBudgetSeconds;
    return std::pair{ok, "distance " + fmt("%.4g", report.distance) + " vs noise " + fmt("%.4g", report.noise_distance) +
                             " (ratio " + fmt("%.3f", report.ratio()) + ", limit 0.25), velocity " +
                             fmt("%.4f", window_means.front()) + " -> " + fmt("%.4f", window_means.back()) + " over " +
                             std::to_string(window_means.size()) + " windows with " + std::to_string(rises) +
                             " increases, " + fmt("%.0f", secs) + "s of 600s"};
  });
}

CheckResult flop_accounting() {
  return timed(9, "FLOP accounting", [] {
    model::ModelConfig cfg;
    cfg.grid_h = 16;
    cfg.grid_w = 16;
    cfg.drop_ratio = 0.75;
    const auto dense = metrics::flops_estimate(cfg, false);
    const auto routed = metrics::flops_estimate(cfg, true);

    // Independent count: QKVO projections, QK^T and PV, two FFN matmuls, adaLN.
    const double d = cfg.width;
    auto block = [&](double n) { return 4 * n * d * d + 2 * n * n * d + 2 * n * d * (cfg.mlp_ratio * d) + 6 * d * d; };
    const double n_dense = cfg.seq_len();
    const double n_sparse = std::round(n_dense * (1.0 - cfg.drop_ratio));
    const double oracle = block(n_dense) / block(n_sparse);
    const double ratio = dense.mid_total / routed.mid_total;
    const bool ok = ratio >= kFlopRatioFloor && std::abs(ratio - oracle) <= 1e-12 * oracle &&
                    routed.total < dense.total;
    return std::pair{ok, "mid-block multiply-adds " + fmt("%.4g", dense.mid_total) + " dense vs " +
                             fmt("%.4g", routed.mid_total) + " routed (" + std::to_string(routed.blocks[2].tokens) +
                             " of " + std::to_string(dense.blocks[2].tokens) + " tokens), ratio " + fmt("%.4f", ratio) +
                             " (oracle " + fmt("%.4f", oracle) + ", floor 2.5)"};
  });
}

CheckResult determinism_and_persistence(const std::string& work_dir) {
  return timed(10, "determinism and persistence", [&] {
    harness::RunConfig cfg;
    cfg.batch_size = 16;
    cfg.seed = 3;
    const long steps = 20;
    const long split = 10;
    auto data = harness::generate_dataset(cfg.data, cfg.model, cfg.seed);

    auto run = [&](harness::TrainState& st, long target, std::vector<std::string>& lines) {
      harness::train(st, data, target, [&](const harness::LogRow& r) { lines.push_back(harness::loss_log_line(r)); });
    };
    std::vector<std::string> log_a, log_b, log_c;
    auto a = harness::init_state(cfg);
    run(a, steps, log_a);
    auto b = harness::init_state(cfg);
    run(b, steps, log_b);
    const bool logs_equal = log_a == log_b;
    const bool hash_equal = harness::state_hash(a) == harness::state_hash(b);

    std::filesystem::create_directories(work_dir);
    const std::string path = (std::filesystem::path(work_dir) / "determinism.ckpt").string();
    auto c = harness::init_state(cfg);
    run(c, split, log_c);
    harness::save_checkpoint(path, c);
    auto loaded = harness::load_checkpoint(path);
    bool roundtrip = loaded.step == c.step && loaded.adam.steps() == c.adam.steps();
    for (const auto& p : c.model->params()) {
      const auto* q = loaded.model->params().find(p.name);
      roundtrip = roundtrip && q != nullptr && q->value.size() == p.value.size() &&
                  std::memcmp(q->value.data(), p.value.data(), sizeof(float) * static_cast<std::size_t>(p.value.size())) == 0;
    }
    for (const auto* moments : {&c.adam.first_moments(), &c.adam.second_moments()}) {
      const auto& other = moments == &c.adam.first_moments() ? loaded.adam.first_moments() : loaded.adam.second_moments();
      for (const auto& [name, mat] : *moments) {
        auto it = other.find(name);
        roundtrip = roundtrip && it != other.end() && it->second.size() == mat.size() &&
                    std::memcmp(it->second.data(), mat.data(), sizeof(float) * static_cast<std::size_t>(mat.size())) == 0;
      }
    }
    run(loaded, steps, log_c);
    const bool resume_equal = log_c == log_a && harness::state_hash(loaded) == harness::state_hash(a);

    // A truncated file must be rejected.
    std::string bytes;
    {
      std::ifstream in(path, std::ios::binary);
      std::ostringstream ss;
      ss << in.rdbuf();
      bytes = ss.str();
    }
    const std::string cut = (std::filesystem::path(work_dir) / "truncated.ckpt").string();
    {
      std::ofstream out(cut, std::ios::binary);
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    bool truncated_rejected = false;
    try {
      (void)harness::load_checkpoint(cut);
    } catch (const harness::CheckpointError&) {
      truncated_rejected = true;
    }
    const bool ok = logs_equal && hash_equal && roundtrip && resume_equal && truncated_rejected;
    auto yn = [](bool b) { return b ? std::string("yes") : std::string("NO"); };
    return std::pair{ok, "repeat logs identical " + yn(logs_equal) + ", final hash identical " + yn(hash_equal) +
                             ", bit-exact round-trip " + yn(roundtrip) + ", resume at step " + std::to_string(split) +
                             " matches " + yn(resume_equal) + ", truncated file rejected " + yn(truncated_rejected)};
  });
}

std::vector<CheckResult> run_all(const CheckOptions& options, const std::function<void(const CheckResult&)>& on_result) {
  std::vector<CheckResult> out;
  auto add = [&](CheckResult r) {
    if (on_result) on_result(r);
    out.push_back(std::move(r));
  };
  add(gradient_oracle());
  add(routing_equivalence());
  add(time_shift_suite());
  add(rope_suite());
  add(loss_oracles());
  add(guidance_collapse());
  add(kernel_distance_oracles());
  if (options.include_toy) add(toy_convergence(options.work_dir));
  add(flop_accounting());
  add(determinism_and_persistence(options.work_dir));
  return out;
}

}  // namespace srdit::checks
