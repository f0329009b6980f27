#include "srdit/checkpoint.hpp"
#include "srdit/config.hpp"
#include "srdit/dataset.hpp"
#include "srdit/trainer.hpp"

#include "support.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

using namespace srdit;
using namespace srdit::harness;
namespace fs = std::filesystem;

namespace {

RunConfig small_run() {
  RunConfig c;
  c.model.grid_h = 4;
  c.model.grid_w = 4;
  c.model.latent_channels = 2;
  c.model.width = 16;
  c.model.n_heads = 2;
  c.model.n_dense_pre = 1;
  c.model.n_mid = 1;
  c.model.n_dense_post = 1;
  c.model.drop_ratio = 0.5;
  c.model.repa_tap_block = 0;
  c.model.n_classes = 3;
  c.model.feature_width = 8;
  c.model.projector_hidden = 16;
  c.data.n_classes = 3;
  c.data.holdout = 24;
  c.batch_size = 8;
  c.steps = 6;
  c.seed = 11;
  return c;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("srdit_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

// 64-bit FNV-1a
std::uint64_t fnv(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void reseal(std::string& bytes) {
  const std::size_t body = bytes.size() - 8;
  const std::uint64_t h = fnv(bytes.substr(0, body));
  std::memcpy(bytes.data() + body, &h, 8);
}

std::vector<losses::LossBundle> run_steps(TrainState& s, const SyntheticDataset& d, long target) {
  std::vector<losses::LossBundle> out;
  train(s, d, target, [&](const LogRow& r) { out.push_back(r.loss); });
  return out;
}

bool same_log(const std::vector<losses::LossBundle>& a, const std::vector<losses::LossBundle>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::memcmp(&a[i], &b[i], sizeof(losses::LossBundle)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("config text round trip") {
  RunConfig c = small_run();
  c.weights.cfm_mode = losses::CfmMode::kTcfm;
  c.model.activation = blocks::Activation::kSwiGlu;
  c.optim.lr = 3e-4;
  c.output_dir = "some/dir";
  const RunConfig back = parse_config(to_text(c));
  CHECK(to_text(back) == to_text(c));
  CHECK(back.optim.lr == 3e-4);
  CHECK(back.model.grid_h == 4);
  CHECK(back.weights.cfm_mode == losses::CfmMode::kTcfm);
  CHECK(back.output_dir == "some/dir");
}

TEST_CASE("config defaults") {
  const RunConfig c = parse_config("# only comments\n\n");
  CHECK(c.optim.lr == 1e-4);
  CHECK(c.optim.beta1 == 0.9);
  CHECK(c.optim.beta2 == 0.95);
  CHECK(c.optim.eps == 1e-8);
  CHECK(c.model.width == 64);
  CHECK(c.model.total_blocks() == 6);
  CHECK(c.batch_size == 64);
  CHECK(c.steps == 2000);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(parse_config("model.widht = 8\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("train.steps = 3\ntrain.steps = 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("train.steps = three\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("train.steps 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("model.rope = maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("data.n_classes = 1\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/srdit.cfg"), ConfigError);
  try {
    parse_config("\n\nmodel.bogus = 1\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    CHECK(std::string(e.what()).find("model.bogus") != std::string::npos);
  }
}

TEST_CASE("derived seeds") {
  CHECK(derive_seed(0, {1}) == derive_seed(0, {1}));
  CHECK(derive_seed(0, {1}) != derive_seed(0, {2}));
  CHECK(derive_seed(0, {1}) != derive_seed(1, {1}));
  CHECK(derive_seed(0, {4, 1}) != derive_seed(0, {4, 2}));
}

TEST_CASE("dataset is determined by the seed") {
  const RunConfig c = small_run();
  const auto a = generate_dataset(c.data, c.model, 5);
  const auto b = generate_dataset(c.data, c.model, 5);
  const auto other = generate_dataset(c.data, c.model, 6);
  CHECK(a.class_means() == b.class_means());
  CHECK(a.class_means() != other.class_means());
  auto ra = derive_rng(1, {2});
  auto rb = derive_rng(1, {2});
  const auto x = a.sample<double>(32, ra);
  const auto y = b.sample<double>(32, rb);
  CHECK(x.labels == y.labels);
  CHECK(x.latents == y.latents);
  CHECK(x.cls_targets == y.cls_targets);
  CHECK(a.holdout<double>().latents == b.holdout<double>().latents);
}

TEST_CASE("dataset class means by the law of large numbers") {
  RunConfig c = small_run();
  c.data.n_classes = 2;
  c.model.n_classes = 2;
  c.data.noise_scale = 1e-3;
  const auto d = generate_dataset(c.data, c.model, 21);
  const int n = 1000;
  auto rng = derive_rng(3, {9});
  for (int y = 0; y < 2; ++y) {
    const auto b = d.sample_labels<double>(std::vector<int>(n, y), rng);
    const Eigen::RowVectorXd mean = b.latents.colwise().mean();
    const double sigma = c.data.noise_scale / std::sqrt(static_cast<double>(n));
    CHECK((mean - d.class_means().row(y)).cwiseAbs().maxCoeff() < 5.0 * sigma);
  }
}

TEST_CASE("dataset classes are separated and CLS targets come from the encoder") {
  const RunConfig c = small_run();
  const auto d = generate_dataset(c.data, c.model, 2);
  CHECK(d.min_mean_separation() > 3.0 * c.data.noise_scale);
  auto rng = derive_rng(0, {0});
  const auto b = d.sample<double>(10, rng);
  const auto enc = losses::encode_frozen<double>(d.encoder(), b.latents);
  CHECK(b.cls_targets == enc.cls);
  CHECK(b.token_features == enc.tokens);
  CHECK(b.cls_targets.cols() == c.model.feature_width);

  DatasetSpec one = c.data;
  one.n_classes = 1;
  CHECK_THROWS_AS(generate_dataset(one, c.model, 0), std::invalid_argument);
  DatasetSpec zero = c.data;
  zero.n_classes = 0;
  CHECK_THROWS_AS(generate_dataset(zero, c.model, 0), std::invalid_argument);
}

TEST_CASE("training is deterministic and the log totals are weighted sums") {
  const RunConfig c = small_run();
  const auto d = generate_dataset(c.data, c.model, c.seed);
  TrainState a = init_state(c);
  TrainState b = init_state(c);
  const auto la = run_steps(a, d, 5);
  const auto lb = run_steps(b, d, 5);
  CHECK(same_log(la, lb));
  CHECK(state_hash(a) == state_hash(b));
  for (const auto& r : la) {
    const double sum = r.velocity + c.weights.lambda_repa * r.repa + c.weights.lambda_cls * r.cls + r.cfm;
    CHECK(std::abs(r.total - sum) <= 1e-6 * std::max(1.0, std::abs(sum)));
    CHECK(r.repa >= -1.0);
    CHECK(r.repa <= 1.0);
  }

  RunConfig other = c;
  other.seed = 12;
  TrainState e = init_state(other);
  CHECK(!same_log(run_steps(e, generate_dataset(other.data, other.model, other.seed), 5), la));
}

TEST_CASE("zeroed auxiliary weights reduce to plain flow matching") {
  RunConfig c = small_run();
  c.weights.lambda_repa = 0.0;
  c.weights.lambda_cls = 0.0;
  c.weights.cfm_mode = losses::CfmMode::kOff;
  const auto d = generate_dataset(c.data, c.model, c.seed);

  TrainState s = init_state(c);
  for (const auto& r : run_steps(s, d, 3)) CHECK(r.total == r.velocity);

  // gradients of the total equal gradients of the velocity term alone
  std::mt19937_64 init(4);
  model::Model<double> m(c.model, 7);
  for (auto& p : m.params()) {
    if (p.trainable) p.value = test::randn(p.value.rows(), p.value.cols(), init, 0.2);
  }
  auto rng = derive_rng(0, {1});
  const auto batch = d.sample<double>(c.batch_size, rng);
  const StepInputs<double> in = prepare_step<double>(m, batch, {c.path_schedule(), 0.1, true}, rng);

  auto grads = [&](bool velocity_only) {
    ag::Graph<double> g;
    auto sg = build_losses<double>(m, g, in, c.weights);
    m.params().zero_grad();
    g.backward(velocity_only ? sg.parts.velocity : sg.total);
    std::vector<Matrix<double>> out;
    for (auto& p : m.params()) {
      out.push_back(p.grad.size() == 0 ? Matrix<double>::Zero(p.value.rows(), p.value.cols()) : p.grad);
    }
    return out;
  };
  const auto full = grads(false);
  const auto vel = grads(true);
  REQUIRE(full.size() == vel.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < full.size(); ++i) worst = std::max(worst, test::max_abs(full[i] - vel[i]));
  CHECK(worst == 0.0);
}

TEST_CASE("non-finite loss names the step and term") {
  const RunConfig c = small_run();
  const auto d = generate_dataset(c.data, c.model, c.seed);
  TrainState s = init_state(c);
  run_steps(s, d, 2);
  s.model->params().at("final.head.bias").value(0, 0) = std::numeric_limits<float>::quiet_NaN();
  try {
    train_step(s, d);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.step == 3);
    CHECK(e.term == "velocity");
    CHECK(std::string(e.what()).find("step 3") != std::string::npos);
  }
}

TEST_CASE("smoke: 200 steps on the toy stack lower the velocity loss") {
  RunConfig c;
  c.seed = 0;
  const auto d = generate_dataset(c.data, c.model, c.seed);
  TrainState s = init_state(c);
  const auto log = run_steps(s, d, 200);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 20; ++i) {
    first += log[static_cast<std::size_t>(i)].velocity / 20;
    last += log[log.size() - 20 + static_cast<std::size_t>(i)].velocity / 20;
  }
  MESSAGE("velocity first20 " << first << " last20 " << last);
  CHECK(last < first);
}

TEST_CASE("checkpoint round trip and resume") {
  const RunConfig c = small_run();
  const auto d = generate_dataset(c.data, c.model, c.seed);
  const fs::path dir = scratch("resume");
  const fs::path path = dir / "k.bin";

  TrainState full = init_state(c);
  const auto full_log = run_steps(full, d, 6);

  TrainState part = init_state(c);
  auto log = run_steps(part, d, 3);
  save_checkpoint(path.string(), part);
  CHECK(!fs::exists(path.string() + ".tmp"));
  TrainState back = load_checkpoint(path.string());
  CHECK(back.step == 3);
  CHECK(back.adam.steps() == part.adam.steps());
  CHECK(to_text(back.config) == to_text(part.config));
  for (const auto& p : part.model->params()) {
    const auto& q = back.model->params().at(p.name);
    REQUIRE(q.value.size() == p.value.size());
    CHECK(std::memcmp(q.value.data(), p.value.data(), sizeof(float) * p.value.size()) == 0);
    const auto& m0 = part.adam.first_moments().at(p.name);
    const auto& v0 = part.adam.second_moments().at(p.name);
    CHECK(std::memcmp(back.adam.first_moments().at(p.name).data(), m0.data(), sizeof(float) * m0.size()) == 0);
    CHECK(std::memcmp(back.adam.second_moments().at(p.name).data(), v0.data(), sizeof(float) * v0.size()) == 0);
  }
  CHECK(state_hash(back) == state_hash(part));
  CHECK(state_hash(back) == fnv(read_bytes(path)));

  const auto rest = run_steps(back, d, 6);
  log.insert(log.end(), rest.begin(), rest.end());
  CHECK(same_log(log, full_log));
  CHECK(state_hash(back) == state_hash(full));
}

TEST_CASE("checkpoint load errors") {
  const RunConfig c = small_run();
  const fs::path dir = scratch("errors");
  const fs::path good = dir / "good.bin";
  save_checkpoint(good.string(), init_state(c));
  const std::string bytes = read_bytes(good);

  CHECK_THROWS_AS(load_checkpoint((dir / "missing.bin").string()), CheckpointError);

  write_bytes(dir / "short.bin", bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint((dir / "short.bin").string()), CheckpointError);

  std::string magic = bytes;
  magic[0] = 'X';
  write_bytes(dir / "magic.bin", magic);
  CHECK_THROWS_AS(load_checkpoint((dir / "magic.bin").string()), CheckpointError);

  std::string flipped = bytes;
  flipped[bytes.size() / 2] = static_cast<char>(flipped[bytes.size() / 2] ^ 1);
  write_bytes(dir / "flip.bin", flipped);
  CHECK_THROWS_AS(load_checkpoint((dir / "flip.bin").string()), CheckpointError);

  std::string version = bytes;
  const std::uint32_t v2 = 2;
  std::memcpy(version.data() + 8, &v2, 4);
  reseal(version);
  write_bytes(dir / "version.bin", version);
  try {
    load_checkpoint((dir / "version.bin").string());
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("version 2") != std::string::npos);
  }

  // same-length edit of the stored config: the projector arrays no longer fit
  std::string shape = bytes;
  const std::string from = "model.projector_hidden = 16";
  const std::string to = "model.projector_hidden = 24";
  const auto at = shape.find(from);
  REQUIRE(at != std::string::npos);
  shape.replace(at, from.size(), to);
  reseal(shape);
  write_bytes(dir / "shape.bin", shape);
  try {
    load_checkpoint((dir / "shape.bin").string());
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("shape") != std::string::npos);
    CHECK(msg.find("repa.fc") != std::string::npos);
  }
}
