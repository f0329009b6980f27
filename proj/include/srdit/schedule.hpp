#pragma once

// Interpolant paths x_t = alpha(t) x + sigma(t) eps, velocity targets, and the
// dimension-dependent time shift used for both training draws and the
// sampling grid. t = 0 is clean data, t = 1 is pure noise.

#include "srdit/autograd.hpp"

#include <random>
#include <span>
#include <string>
#include <vector>

namespace srdit::schedule {

enum class PathKind { kLinear, kCosine };

PathKind parse_path_kind(const std::string& s);
std::string to_string(PathKind kind);

struct PathCoefficients {
  double alpha;
  double sigma;
  double dalpha;
  double dsigma;
};

/// Reference dimensionality at which the shift is the identity.
inline constexpr double kReferenceDim = 4096.0;

struct PathSchedule {
  PathKind kind = PathKind::kLinear;
  long dim = 4096;  // full latent dimensionality C*H*W
  bool shift_enabled = true;

  [[nodiscard]] double shift_factor() const;
};

/// Throws std::domain_error for t outside [0, 1].
PathCoefficients path_coefficients(double t, PathKind kind);

double shift_factor(double dim);
double time_shift(double t, double dim);
double inverse_time_shift(double t_shifted, double dim);

/// Uniform draws passed through the time shift when enabled.
std::vector<double> sample_timesteps(int batch_size, std::mt19937_64& rng, const PathSchedule& schedule);

/// nfe + 1 strictly decreasing knots from exactly 1 to exactly 0.
std::vector<double> step_grid(int nfe, const PathSchedule& schedule);

template <typename T>
Matrix<T> noisy_sample(const Matrix<T>& x, const Matrix<T>& eps, double t, PathKind kind) {
  if (x.rows() != eps.rows() || x.cols() != eps.cols()) {
    throw ShapeError("noisy_sample: x " + shape_str(x.rows(), x.cols()) + " vs eps " +
                     shape_str(eps.rows(), eps.cols()));
  }
  const auto c = path_coefficients(t, kind);
  return static_cast<T>(c.alpha) * x + static_cast<T>(c.sigma) * eps;
}

template <typename T>
Matrix<T> velocity_target(const Matrix<T>& x, const Matrix<T>& eps, double t, PathKind kind) {
  if (x.rows() != eps.rows() || x.cols() != eps.cols()) {
    throw ShapeError("velocity_target: x " + shape_str(x.rows(), x.cols()) + " vs eps " +
                     shape_str(eps.rows(), eps.cols()));
  }
  const auto c = path_coefficients(t, kind);
  return static_cast<T>(c.dalpha) * x + static_cast<T>(c.dsigma) * eps;
}

/// Batched forms: rows [i*rows_per_sample, (i+1)*rows_per_sample) use ts[i].
template <typename T>
Matrix<T> noisy_sample_batch(const Matrix<T>& x, const Matrix<T>& eps, std::span<const double> ts,
                             Eigen::Index rows_per_sample, PathKind kind) {
  if (x.rows() != eps.rows() || x.cols() != eps.cols() ||
      x.rows() != static_cast<Eigen::Index>(ts.size()) * rows_per_sample) {
    throw ShapeError("noisy_sample_batch: shape mismatch");
  }
  Matrix<T> out(x.rows(), x.cols());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto c = path_coefficients(ts[i], kind);
    const auto r0 = static_cast<Eigen::Index>(i) * rows_per_sample;
    out.middleRows(r0, rows_per_sample) = static_cast<T>(c.alpha) * x.middleRows(r0, rows_per_sample) +
                                          static_cast<T>(c.sigma) * eps.middleRows(r0, rows_per_sample);
  }
  return out;
}

template <typename T>
Matrix<T> velocity_target_batch(const Matrix<T>& x, const Matrix<T>& eps, std::span<const double> ts,
                                Eigen::Index rows_per_sample, PathKind kind) {
  if (x.rows() != eps.rows() || x.cols() != eps.cols() ||
      x.rows() != static_cast<Eigen::Index>(ts.size()) * rows_per_sample) {
    throw ShapeError("velocity_target_batch: shape mismatch");
  }
  Matrix<T> out(x.rows(), x.cols());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto c = path_coefficients(ts[i], kind);
    const auto r0 = static_cast<Eigen::Index>(i) * rows_per_sample;
    out.middleRows(r0, rows_per_sample) = static_cast<T>(c.dalpha) * x.middleRows(r0, rows_per_sample) +
                                          static_cast<T>(c.dsigma) * eps.middleRows(r0, rows_per_sample);
  }
  return out;
}

}  // namespace srdit::schedule
