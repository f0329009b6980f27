#pragma once

// One optimisation step of the full objective and the training loop around it.

#include "srdit/config.hpp"
#include "srdit/dataset.hpp"
#include "srdit/losses.hpp"
#include "srdit/model.hpp"
#include "srdit/routing.hpp"
#include "srdit/schedule.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace srdit::harness {

/// Everything random about one step, drawn in a fixed order.
template <typename T>
struct StepInputs {
  std::vector<double> t;
  std::vector<int> labels;  // after label dropout
  Matrix<T> x_tokens;       // noised latents, token layout
  Matrix<T> v_target;       // token layout
  Matrix<T> v_shuffled;     // v_target with samples permuted
  Matrix<T> token_features; // clean frozen-encoder features, token layout
  Matrix<T> cls_noised;     // B x d
  Matrix<T> cls_target;     // B x d
  std::optional<routing::RoutePlan> plan;
};

struct StepOptions {
  schedule::PathSchedule schedule;
  double label_dropout = 0.0;
  bool route = true;  // draw a route plan for the middle blocks
};

template <typename T>
StepInputs<T> prepare_step(model::Model<T>& m, const Batch<T>& batch, const StepOptions& opt, std::mt19937_64& rng) {
  const auto& cfg = m.config();
  const int B = static_cast<int>(batch.latents.rows());
  const int P = cfg.patch_tokens();
  StepInputs<T> s;
  s.t = schedule::sample_timesteps(B, rng, opt.schedule);

  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<T> eps(batch.latents.rows(), batch.latents.cols());
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = static_cast<T>(normal(rng));
  Matrix<T> eps_cls(B, cfg.width);
  for (Eigen::Index i = 0; i < eps_cls.size(); ++i) eps_cls.data()[i] = static_cast<T>(normal(rng));

  const Matrix<T> xt = schedule::noisy_sample_batch<T>(batch.latents, eps, s.t, 1, opt.schedule.kind);
  const Matrix<T> vt = schedule::velocity_target_batch<T>(batch.latents, eps, s.t, 1, opt.schedule.kind);
  s.x_tokens = model::latents_to_tokens<T>(xt, cfg.latent_channels, P);
  s.v_target = model::latents_to_tokens<T>(vt, cfg.latent_channels, P);
  s.token_features = batch.token_features;
  if (cfg.reg) {
    auto tok = m.make_cls_token(m.project_cls(batch.cls_targets), s.t, eps_cls, opt.schedule.kind);
    s.cls_noised = std::move(tok.noised);
    s.cls_target = std::move(tok.target);
  }

  if (opt.route && cfg.n_mid > 0) s.plan = routing::make_route_plan(cfg.seq_len(), cfg.drop_ratio, rng, cfg.reg);
  s.v_shuffled = losses::shuffle_targets<T>(s.v_target, P, rng);

  std::bernoulli_distribution drop(opt.label_dropout);
  s.labels = batch.labels;
  for (int& y : s.labels) {
    if (drop(rng)) y = model::kNullClass;
  }
  return s;
}

template <typename T>
struct StepGraph {
  losses::LossParts<ag::Var<T>> parts;
  ag::Var<T> total;
};

/// Forward pass and every loss term on graph g.
template <typename T>
StepGraph<T> build_losses(model::Model<T>& m, ag::Graph<T>& g, const StepInputs<T>& s, const losses::LossWeights& w) {
  const auto& cfg = m.config();
  const int P = cfg.patch_tokens();
  typename model::Model<T>::ForwardInputs in;
  in.x_tokens = &s.x_tokens;
  in.t = s.t;
  in.labels = s.labels;
  in.cls_noised = cfg.reg ? &s.cls_noised : nullptr;
  in.plan = s.plan ? &*s.plan : nullptr;
  auto out = m.forward(g, in);

  StepGraph<T> r;
  r.parts.velocity = losses::velocity_loss(out.velocity, s.v_target);

  const int B = static_cast<int>(s.t.size());
  std::vector<int> rows;
  rows.reserve(static_cast<std::size_t>(B) * out.tapped_positions.size());
  for (int b = 0; b < B; ++b) {
    for (int p : out.tapped_positions) rows.push_back(b * P + p);
  }
  Matrix<T> repa_targets(static_cast<Eigen::Index>(rows.size()), s.token_features.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) repa_targets.row(static_cast<Eigen::Index>(i)) = s.token_features.row(rows[i]);
  r.parts.repa = losses::repa_loss(m.repa_project(g, out.tapped), repa_targets);

  r.parts.cls = cfg.reg ? losses::cls_loss(out.cls_velocity, s.cls_target) : g.constant(Matrix<T>::Zero(1, 1));
  r.parts.cfm = losses::cfm_loss(out.velocity, s.v_shuffled, w, s.t, P);
  r.total = losses::weighted_total(r.parts, w);
  return r;
}

template <typename T>
losses::LossParts<double> part_values(const losses::LossParts<ag::Var<T>>& p) {
  return {static_cast<double>(p.velocity.scalar()), static_cast<double>(p.repa.scalar()),
          static_cast<double>(p.cls.scalar()), static_cast<double>(p.cfm.scalar())};
}

/// Adam with bias correction; frozen parameters are skipped.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(const AdamConfig& cfg, const ParamSet<T>& params) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.emplace(p.name, Matrix<T>::Zero(p.value.rows(), p.value.cols()));
      v_.emplace(p.name, Matrix<T>::Zero(p.value.rows(), p.value.cols()));
    }
  }

  void step(ParamSet<T>& params) {
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    const T lr = static_cast<T>(cfg_.lr);
    const T eps = static_cast<T>(cfg_.eps);
    for (auto& p : params) {
      if (!p.trainable) continue;
      if (p.grad.size() == 0) p.zero_grad();
      auto& m = m_.at(p.name);
      auto& v = v_.at(p.name);
      m = b1 * m + (T(1) - b1) * p.grad;
      v = b2 * v + (T(1) - b2) * p.grad.cwiseProduct(p.grad);
      p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    }
  }

  [[nodiscard]] long steps() const { return t_; }
  void set_steps(long t) { t_ = t; }
  std::map<std::string, Matrix<T>>& first_moments() { return m_; }
  std::map<std::string, Matrix<T>>& second_moments() { return v_; }
  const std::map<std::string, Matrix<T>>& first_moments() const { return m_; }
  const std::map<std::string, Matrix<T>>& second_moments() const { return v_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, Matrix<T>> m_;
  std::map<std::string, Matrix<T>> v_;
};

/// Raised when a step produces a non-finite loss; names the step and term.
struct TrainingError : std::runtime_error {
  TrainingError(long step, const std::string& term, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + ": " + what), step(step), term(term) {}
  long step;
  std::string term;
};

struct TrainState {
  RunConfig config;
  std::unique_ptr<model::Model<float>> model;
  Adam<float> adam;
  long step = 0;  // completed steps
};

/// Fresh state: model initialised from the run seed, zero moments.
TrainState init_state(const RunConfig& config);

/// One step with randomness derived from (seed, step).
losses::LossBundle train_step(TrainState& state, const SyntheticDataset& data);

struct LogRow {
  long step;  // 1-based index of the completed step
  losses::LossBundle loss;
};

std::string loss_log_header();
std::string loss_log_line(const LogRow& row);

/// Runs until state.step == target_step, calling on_step after each step.
void train(TrainState& state, const SyntheticDataset& data, long target_step,
           const std::function<void(const LogRow&)>& on_step = {});

}  // namespace srdit::harness
