#include "srdit/trainer.hpp"

#include "srdit/runtime.hpp"

#include <cstdio>

namespace srdit::harness {

TrainState init_state(const RunConfig& config) {
  config.validate();
  configure_allocator();
  TrainState s;
  s.config = config;
  s.model = std::make_unique<model::Model<float>>(config.model, derive_seed(config.seed, {stream::kModel}));
  s.adam = Adam<float>(config.optim, s.model->params());
  return s;
}

losses::LossBundle train_step(TrainState& state, const SyntheticDataset& data) {
  const RunConfig& cfg = state.config;
  auto rng = derive_rng(cfg.seed, {stream::kTrain, static_cast<std::uint64_t>(state.step)});
  auto batch = data.sample<float>(cfg.batch_size, rng);
  StepOptions opt{cfg.path_schedule(), cfg.label_dropout, true};
  auto inputs = prepare_step<float>(*state.model, batch, opt, rng);

  ag::Graph<float> g;
  auto sg = build_losses<float>(*state.model, g, inputs, cfg.weights);
  losses::LossBundle bundle;
  try {
    bundle = losses::total_loss(part_values(sg.parts), cfg.weights);
  } catch (const losses::NonFiniteLoss& e) {
    throw TrainingError(state.step + 1, e.term, e.what());
  }
  state.model->params().zero_grad();
  g.backward(sg.total);
  state.adam.step(state.model->params());
  ++state.step;
  return bundle;
}

std::string loss_log_header() { return "step,velocity,repa,cls,cfm,total"; }

std::string loss_log_line(const LogRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g,%.9g,%.9g", row.step, row.loss.velocity, row.loss.repa,
                row.loss.cls, row.loss.cfm, row.loss.total);
  return buf;
}

void train(TrainState& state, const SyntheticDataset& data, long target_step,
           const std::function<void(const LogRow&)>& on_step) {
  while (state.step < target_step) {
    auto loss = train_step(state, data);
    if (on_step) on_step({state.step, loss});
  }
}

}  // namespace srdit::harness
