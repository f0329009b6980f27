#pragma once

// Euler integration of a learned velocity field from noise (t = 1) to data
// (t = 0) over the time-shifted grid, with optional classifier-free or
// path-drop guidance gated to an interval of t.

#include "srdit/autograd.hpp"
#include "srdit/model.hpp"
#include "srdit/schedule.hpp"

#include <cmath>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace srdit::sampler {

enum class GuidanceMode { kNone, kCfg, kPdg };

GuidanceMode parse_guidance_mode(const std::string& s);
std::string to_string(GuidanceMode m);

struct GuidanceConfig {
  GuidanceMode mode = GuidanceMode::kNone;
  double scale = 1.0;
  double t_low = 0.10;
  double t_high = 0.80;

  void validate() const;
};

/// True iff guidance is enabled and t_low <= t <= t_high.
bool guidance_active(double t, const GuidanceConfig& config);

/// v_weak + s (v_cond - v_weak); s == 1 returns v_cond exactly.
template <typename T>
Matrix<T> guide(const Matrix<T>& v_cond, const Matrix<T>& v_weak, double s) {
  if (v_cond.rows() != v_weak.rows() || v_cond.cols() != v_weak.cols()) throw ShapeError("guide: shape mismatch");
  if (s == 1.0) return v_cond;
  return v_weak + static_cast<T>(s) * (v_cond - v_weak);
}

/// Labels 0,1,...,K-1,0,1,... so per-class counts differ by at most one and
/// the remainder goes to the lowest class ids.
std::vector<int> balanced_labels(int num_samples, int num_classes);

/// Anything that predicts a velocity for a batch of sampler states.
template <typename T>
class VelocityField {
 public:
  virtual ~VelocityField() = default;
  [[nodiscard]] virtual int state_dim() const = 0;
  virtual Matrix<T> conditional(const Matrix<T>& state, std::span<const double> t, std::span<const int> labels) = 0;
  /// null-class prediction with the full network (CFG branch)
  virtual Matrix<T> unconditional(const Matrix<T>& state, std::span<const double> t) = 0;
  /// weakened unconditional prediction (PDG branch)
  virtual Matrix<T> weak(const Matrix<T>& state, std::span<const double> t) = 0;
};

template <typename T>
class ModelField final : public VelocityField<T> {
 public:
  explicit ModelField(model::Model<T>& m) : model_(m) {}
  [[nodiscard]] int state_dim() const override { return model_.config().state_dim(); }
  Matrix<T> conditional(const Matrix<T>& state, std::span<const double> t, std::span<const int> labels) override {
    return model_.predict(state, t, labels, model::PathMode::kFull);
  }
  Matrix<T> unconditional(const Matrix<T>& state, std::span<const double> t) override {
    const std::vector<int> null_labels(t.size(), model::kNullClass);
    return model_.predict(state, t, null_labels, model::PathMode::kFull);
  }
  Matrix<T> weak(const Matrix<T>& state, std::span<const double> t) override {
    return model_.predict(state, t, {}, model::PathMode::kWeak);
  }

 private:
  model::Model<T>& model_;
};

struct SampleStats {
  int steps = 0;
  int guided_steps = 0;
  int field_calls = 0;
};

/// Standard-normal initial state (B x state_dim).
template <typename T>
Matrix<T> initial_noise(Eigen::Index batch, int state_dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<T> x(batch, state_dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<T>(normal(rng));
  return x;
}

/// Integrates dx/dt = v from t = 1 to t = 0 starting at `x`.
template <typename T>
Matrix<T> euler_integrate(VelocityField<T>& field, Matrix<T> x, std::span<const int> labels, int nfe,
                          const GuidanceConfig& guidance, const schedule::PathSchedule& schedule,
                          SampleStats* stats = nullptr) {
  guidance.validate();
  if (x.cols() != field.state_dim() || x.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw ShapeError("euler_sample: state " + shape_str(x.rows(), x.cols()) + " vs " +
                     std::to_string(labels.size()) + " labels and state width " + std::to_string(field.state_dim()));
  }
  const auto grid = schedule::step_grid(nfe, schedule);
  SampleStats local;
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const std::vector<double> t(labels.size(), grid[k]);
    Matrix<T> v = field.conditional(x, t, labels);
    ++local.field_calls;
    if (guidance_active(grid[k], guidance)) {
      Matrix<T> v_weak =
          guidance.mode == GuidanceMode::kCfg ? field.unconditional(x, t) : field.weak(x, t);
      ++local.field_calls;
      ++local.guided_steps;
      v = guide<T>(v, v_weak, guidance.scale);
    }
    x += static_cast<T>(grid[k + 1] - grid[k]) * v;
    ++local.steps;
    if (!x.allFinite()) {
      throw std::runtime_error("euler_sample: non-finite state after step " + std::to_string(k) + " at t=" +
                               std::to_string(grid[k + 1]));
    }
  }
  if (stats != nullptr) *stats = local;
  return x;
}

/// Draws noise from rng and integrates it. Returns the final state rows.
template <typename T>
Matrix<T> euler_sample(VelocityField<T>& field, std::span<const int> labels, int nfe, const GuidanceConfig& guidance,
                       const schedule::PathSchedule& schedule, std::mt19937_64& rng, SampleStats* stats = nullptr) {
  Matrix<T> x = initial_noise<T>(static_cast<Eigen::Index>(labels.size()), field.state_dim(), rng);
  return euler_integrate(field, std::move(x), labels, nfe, guidance, schedule, stats);
}

}  // namespace srdit::sampler
