#include "srdit/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace srdit::blocks {

Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::kGelu;
  if (s == "relu2") return Activation::kRelu2;
  if (s == "lopsided_leaky_relu2") return Activation::kLopsidedLeakyRelu2;
  if (s == "swiglu") return Activation::kSwiGlu;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kGelu: return "gelu";
    case Activation::kRelu2: return "relu2";
    case Activation::kLopsidedLeakyRelu2: return "lopsided_leaky_relu2";
    case Activation::kSwiGlu: return "swiglu";
  }
  return "unknown";
}

RopeTable rope_build(int head_dim, int grid_h, int grid_w, double base) {
  if (head_dim <= 0 || head_dim % 4 != 0) {
    throw std::invalid_argument("rope_build: head_dim " + std::to_string(head_dim) + " is not divisible by 4");
  }
  if (grid_h < 1 || grid_w < 1) throw std::invalid_argument("rope_build: empty grid");
  if (!(base > 0.0)) throw std::invalid_argument("rope_build: base must be positive");

  RopeTable table;
  table.head_dim = head_dim;
  table.grid_h = grid_h;
  table.grid_w = grid_w;
  table.base = base;
  const int axis_dim = head_dim / 2;  // dims per spatial axis
  const int axis_pairs = axis_dim / 2;
  table.angles.setZero(grid_h * grid_w, head_dim / 2);
  for (int r = 0; r < grid_h; ++r) {
    for (int c = 0; c < grid_w; ++c) {
      const int pos = r * grid_w + c;
      for (int j = 0; j < axis_pairs; ++j) {
        const double freq = std::pow(base, -2.0 * j / axis_dim);
        table.angles(pos, j) = r * freq;
        table.angles(pos, axis_pairs + j) = c * freq;
      }
    }
  }
  return table;
}

}  // namespace srdit::blocks
