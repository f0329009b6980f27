#include "srdit/evaluate.hpp"

namespace srdit::harness {

GeneratedSamples generate(model::Model<float>& m, const std::vector<int>& labels, int nfe,
                          const sampler::GuidanceConfig& guidance, const schedule::PathSchedule& schedule,
                          std::uint64_t seed) {
  auto rng = derive_rng(seed, {stream::kSample});
  sampler::ModelField<float> field(m);
  GeneratedSamples out;
  out.labels = labels;
  Matrix<float> state = sampler::euler_sample<float>(field, labels, nfe, guidance, schedule, rng, &out.stats);
  out.latents = state.leftCols(m.config().latent_dim());
  return out;
}

EvalReport evaluate(TrainState& state, const SyntheticDataset& data, int n_samples, int nfe,
                    const sampler::GuidanceConfig& guidance, std::uint64_t seed) {
  const auto labels = sampler::balanced_labels(n_samples, data.n_classes());
  auto gen = generate(*state.model, labels, nfe, guidance, state.config.path_schedule(), seed);
  const auto real = data.holdout<float>();

  auto noise_rng = derive_rng(seed, {stream::kNoise});
  const Matrix<float> noise = sampler::initial_noise<float>(n_samples, data.latent_dim(), noise_rng);

  const auto f_real = metrics::extract_features<float>(real.latents, data.encoder());
  EvalReport r;
  r.distance = metrics::kernel_distance(metrics::extract_features<float>(gen.latents, data.encoder()), f_real);
  r.noise_distance = metrics::kernel_distance(metrics::extract_features<float>(noise, data.encoder()), f_real);
  r.n_generated = n_samples;
  r.n_real = static_cast<int>(real.latents.rows());
  r.nfe = nfe;
  r.extractor = f_real.extractor;
  return r;
}

}  // namespace srdit::harness
