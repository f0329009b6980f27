#include "srdit/schedule.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace srdit::schedule {

PathKind parse_path_kind(const std::string& s) {
  if (s == "linear") return PathKind::kLinear;
  if (s == "cosine") return PathKind::kCosine;
  throw std::invalid_argument("unknown path kind '" + s + "'");
}

std::string to_string(PathKind kind) { return kind == PathKind::kLinear ? "linear" : "cosine"; }

double PathSchedule::shift_factor() const { return schedule::shift_factor(static_cast<double>(dim)); }

PathCoefficients path_coefficients(double t, PathKind kind) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("path_coefficients: t=" + std::to_string(t) + " outside [0,1]");
  if (kind == PathKind::kLinear) return {1.0 - t, t, -1.0, 1.0};
  constexpr double half_pi = std::numbers::pi / 2.0;
  const double c = std::cos(half_pi * t);
  const double s = std::sin(half_pi * t);
  return {c, s, -half_pi * s, half_pi * c};
}

double shift_factor(double dim) {
  if (!(dim > 0.0)) throw std::domain_error("shift_factor: dimension must be positive");
  return std::sqrt(dim / kReferenceDim);
}

double time_shift(double t, double dim) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("time_shift: t outside [0,1]");
  const double s = shift_factor(dim);
  return s * t / (1.0 + (s - 1.0) * t);
}

double inverse_time_shift(double t_shifted, double dim) {
  if (!(t_shifted >= 0.0 && t_shifted <= 1.0)) throw std::domain_error("inverse_time_shift: t outside [0,1]");
  const double s = shift_factor(dim);
  return t_shifted / (s - (s - 1.0) * t_shifted);
}

std::vector<double> sample_timesteps(int batch_size, std::mt19937_64& rng, const PathSchedule& schedule) {
  if (batch_size < 1) throw std::invalid_argument("sample_timesteps: batch_size must be >= 1");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> ts(static_cast<std::size_t>(batch_size));
  for (auto& t : ts) {
    t = uniform(rng);
    if (schedule.shift_enabled) t = time_shift(t, static_cast<double>(schedule.dim));
  }
  return ts;
}

std::vector<double> step_grid(int nfe, const PathSchedule& schedule) {
  if (nfe < 1) throw std::invalid_argument("step_grid: nfe must be >= 1");
  std::vector<double> grid(static_cast<std::size_t>(nfe) + 1);
  for (int k = 0; k <= nfe; ++k) {
    double u = static_cast<double>(nfe - k) / nfe;
    if (schedule.shift_enabled) u = time_shift(u, static_cast<double>(schedule.dim));
    grid[static_cast<std::size_t>(k)] = u;
  }
  grid.front() = 1.0;
  grid.back() = 0.0;
  return grid;
}

}  // namespace srdit::schedule
