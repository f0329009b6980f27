#include "srdit/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <vector>

namespace srdit::harness {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& v) {
  std::size_t used = 0;
  double d = std::stod(v, &used);
  if (used != v.size()) throw std::invalid_argument("trailing characters");
  return d;
}

long to_long(const std::string& v) {
  std::size_t used = 0;
  long x = std::stol(v, &used);
  if (used != v.size()) throw std::invalid_argument("trailing characters");
  return x;
}

int to_int(const std::string& v) { return static_cast<int>(to_long(v)); }

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("expected true/false");
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename M>
Field int_field(M member) {
  return {[member](RunConfig& c, const std::string& v) { member(c) = to_int(v); },
          [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
}
template <typename M>
Field long_field(M member) {
  return {[member](RunConfig& c, const std::string& v) { member(c) = to_long(v); },
          [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
}
template <typename M>
Field double_field(M member) {
  return {[member](RunConfig& c, const std::string& v) { member(c) = to_double(v); },
          [member](const RunConfig& c) { return fmt_double(member(const_cast<RunConfig&>(c))); }};
}
template <typename M>
Field bool_field(M member) {
  return {[member](RunConfig& c, const std::string& v) { member(c) = to_bool(v); },
          [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

// Documented keys, in canonical output order.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"model.grid_h", int_field([](RunConfig& c) -> int& { return c.model.grid_h; })},
      {"model.grid_w", int_field([](RunConfig& c) -> int& { return c.model.grid_w; })},
      {"model.channels", int_field([](RunConfig& c) -> int& { return c.model.latent_channels; })},
      {"model.width", int_field([](RunConfig& c) -> int& { return c.model.width; })},
      {"model.heads", int_field([](RunConfig& c) -> int& { return c.model.n_heads; })},
      {"model.dense_pre", int_field([](RunConfig& c) -> int& { return c.model.n_dense_pre; })},
      {"model.mid", int_field([](RunConfig& c) -> int& { return c.model.n_mid; })},
      {"model.dense_post", int_field([](RunConfig& c) -> int& { return c.model.n_dense_post; })},
      {"model.drop_ratio", double_field([](RunConfig& c) -> double& { return c.model.drop_ratio; })},
      {"model.activation",
       {[](RunConfig& c, const std::string& v) { c.model.activation = blocks::parse_activation(v); },
        [](const RunConfig& c) { return blocks::to_string(c.model.activation); }}},
      {"model.mlp_ratio", int_field([](RunConfig& c) -> int& { return c.model.mlp_ratio; })},
      {"model.repa_tap_block", int_field([](RunConfig& c) -> int& { return c.model.repa_tap_block; })},
      {"model.value_residual", bool_field([](RunConfig& c) -> bool& { return c.model.value_residual; })},
      {"model.qk_norm", bool_field([](RunConfig& c) -> bool& { return c.model.qk_norm; })},
      {"model.rope", bool_field([](RunConfig& c) -> bool& { return c.model.rope; })},
      {"model.reg", bool_field([](RunConfig& c) -> bool& { return c.model.reg; })},
      {"model.feature_width", int_field([](RunConfig& c) -> int& { return c.model.feature_width; })},
      {"model.projector_hidden", int_field([](RunConfig& c) -> int& { return c.model.projector_hidden; })},
      {"loss.lambda_repa", double_field([](RunConfig& c) -> double& { return c.weights.lambda_repa; })},
      {"loss.lambda_cls", double_field([](RunConfig& c) -> double& { return c.weights.lambda_cls; })},
      {"loss.lambda_cfm", double_field([](RunConfig& c) -> double& { return c.weights.lambda_cfm; })},
      {"loss.cfm_mode",
       {[](RunConfig& c, const std::string& v) { c.weights.cfm_mode = losses::parse_cfm_mode(v); },
        [](const RunConfig& c) { return losses::to_string(c.weights.cfm_mode); }}},
      {"loss.tcfm_lambda", double_field([](RunConfig& c) -> double& { return c.weights.tcfm_lambda; })},
      {"optim.lr", double_field([](RunConfig& c) -> double& { return c.optim.lr; })},
      {"optim.beta1", double_field([](RunConfig& c) -> double& { return c.optim.beta1; })},
      {"optim.beta2", double_field([](RunConfig& c) -> double& { return c.optim.beta2; })},
      {"optim.eps", double_field([](RunConfig& c) -> double& { return c.optim.eps; })},
      {"data.n_classes", int_field([](RunConfig& c) -> int& { return c.data.n_classes; })},
      {"data.noise_scale", double_field([](RunConfig& c) -> double& { return c.data.noise_scale; })},
      {"data.pattern_amplitude", double_field([](RunConfig& c) -> double& { return c.data.pattern_amplitude; })},
      {"data.holdout", int_field([](RunConfig& c) -> int& { return c.data.holdout; })},
      {"train.batch_size", int_field([](RunConfig& c) -> int& { return c.batch_size; })},
      {"train.steps", long_field([](RunConfig& c) -> long& { return c.steps; })},
      {"train.seed",
       {[](RunConfig& c, const std::string& v) { c.seed = std::stoull(v); },
        [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"train.label_dropout", double_field([](RunConfig& c) -> double& { return c.label_dropout; })},
      {"train.eval_every", long_field([](RunConfig& c) -> long& { return c.eval_every; })},
      {"train.eval_samples", int_field([](RunConfig& c) -> int& { return c.eval_samples; })},
      {"train.path",
       {[](RunConfig& c, const std::string& v) { c.path = schedule::parse_path_kind(v); },
        [](const RunConfig& c) { return schedule::to_string(c.path); }}},
      {"train.time_shift", bool_field([](RunConfig& c) -> bool& { return c.time_shift; })},
      {"sample.nfe", int_field([](RunConfig& c) -> int& { return c.nfe; })},
      {"output_dir",
       {[](RunConfig& c, const std::string& v) { c.output_dir = v; },
        [](const RunConfig& c) { return c.output_dir; }}},
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
    weights.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (model.n_classes != data.n_classes) throw ConfigError("model and dataset class counts differ");
  if (data.n_classes < 2) throw ConfigError("data.n_classes must be >= 2");
  if (!(data.noise_scale > 0.0)) throw ConfigError("data.noise_scale must be positive");
  if (data.holdout < 2) throw ConfigError("data.holdout must be >= 2");
  if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
  if (steps < 0) throw ConfigError("train.steps must be >= 0");
  if (!(label_dropout >= 0.0 && label_dropout < 1.0)) throw ConfigError("train.label_dropout must lie in [0,1)");
  if (!(optim.lr > 0.0) || !(optim.beta1 >= 0.0 && optim.beta1 < 1.0) || !(optim.beta2 >= 0.0 && optim.beta2 < 1.0) ||
      !(optim.eps > 0.0)) {
    throw ConfigError("invalid optimizer hyperparameters");
  }
  if (nfe < 1) throw ConfigError("sample.nfe must be >= 1");
  if (eval_every < 0 || eval_samples < 2) throw ConfigError("invalid evaluation cadence");
}

RunConfig parse_config(const std::string& text) {
  std::map<std::string, const Field*> lookup;
  for (const auto& [k, f] : fields()) lookup.emplace(k, &f);

  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = lookup.find(key);
    if (it == lookup.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    try {
      it->second->set(cfg, value);
    } catch (const std::exception& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": bad value '" + value + "' for '" + key + "' (" +
                        e.what() + ")");
    }
  }
  cfg.model.n_classes = cfg.data.n_classes;
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const RunConfig& config) {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(config) + "\n";
  return out;
}

}  // namespace srdit::harness
