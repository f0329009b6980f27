#include "srdit/model.hpp"

#include <stdexcept>

namespace srdit::model {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (grid_h < 1 || grid_w < 1) fail("grid must be at least 1x1");
  if (latent_channels < 1) fail("latent_channels must be >= 1");
  if (width < 2 || width % 2 != 0) fail("width must be even and >= 2");
  if (n_heads < 1 || width % n_heads != 0) fail("width must be divisible by n_heads");
  if (rope && head_dim() % 4 != 0) fail("head_dim must be divisible by 4 when rope is enabled");
  if (n_dense_pre < 1) fail("at least one dense prefix block is required");
  if (n_mid < 0 || n_dense_post < 0) fail("block counts must be non-negative");
  if (!(drop_ratio >= 0.0 && drop_ratio < 1.0)) fail("drop_ratio must lie in [0,1)");
  if (repa_tap_block < 0 || repa_tap_block >= total_blocks()) fail("repa_tap_block must index an existing block");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (n_classes < 1) fail("n_classes must be >= 1");
  if (feature_width < 1 || projector_hidden < 1) fail("feature and projector widths must be positive");
}

template class Model<float>;
template class Model<double>;

}  // namespace srdit::model
