#include "srdit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace srdit::harness {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'S', 'R', 'D', 'I', 'T', 'C', 'K', 'P'};

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

class Writer {
 public:
  template <typename U>
  void pod(U v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void bytes(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
  }
  void array(const std::string& name, const Matrix<float>& m) {
    bytes(name);
    pod(static_cast<std::uint32_t>(m.rows()));
    pod(static_cast<std::uint32_t>(m.cols()));
    buf_.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(float));
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}
  template <typename U>
  U pod() {
    U v;
    take(&v, sizeof v);
    return v;
  }
  std::string bytes() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void take(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, buf_.data() + pos_, n);
    pos_ += n;
  }
  [[nodiscard]] std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::string serialize(const TrainState& state) {
  Writer w;
  w.buffer().append(kMagic, sizeof kMagic);
  w.pod(kCheckpointVersion);
  const std::string cfg = to_text(state.config);
  w.pod(static_cast<std::uint64_t>(cfg.size()));
  w.buffer() += cfg;
  w.pod(static_cast<std::int64_t>(state.step));
  const auto& params = state.model->params();
  w.pod(static_cast<std::uint32_t>(3 * params.size()));
  for (const auto& p : params) w.array(p.name, p.value);
  for (const auto& [name, m] : state.adam.first_moments()) w.array("adam.m." + name, m);
  for (const auto& [name, m] : state.adam.second_moments()) w.array("adam.v." + name, m);
  w.pod(fnv1a(w.buffer()));
  return std::move(w.buffer());
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainState& state) {
  const std::string bytes = serialize(state);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint '" + path + "'");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed for '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move checkpoint into '" + path + "'");
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read checkpoint '" + path + "'");
  const std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof kMagic + sizeof(std::uint64_t)) throw CheckpointError("checkpoint truncated: too short");
  if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) throw CheckpointError("not a checkpoint (bad magic)");

  const std::size_t body = buf.size() - sizeof(std::uint64_t);
  Reader r(buf, body);
  char magic[sizeof kMagic];
  r.take(magic, sizeof magic);
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  std::uint64_t stored = 0;
  std::memcpy(&stored, buf.data() + body, sizeof stored);
  if (stored != fnv1a(buf.substr(0, body))) throw CheckpointError("checkpoint checksum mismatch (truncated or corrupt)");

  const auto cfg_len = r.pod<std::uint64_t>();
  if (cfg_len > r.remaining()) throw CheckpointError("checkpoint truncated in config record");
  std::string cfg_text(static_cast<std::size_t>(cfg_len), '\0');
  r.take(cfg_text.data(), cfg_text.size());
  RunConfig cfg;
  try {
    cfg = parse_config(cfg_text);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config record invalid: ") + e.what());
  }
  TrainState state = init_state(cfg);
  state.step = static_cast<long>(r.pod<std::int64_t>());

  auto& params = state.model->params();
  const auto count = r.pod<std::uint32_t>();
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes();
    const auto rows = r.pod<std::uint32_t>();
    const auto cols = r.pod<std::uint32_t>();
    Matrix<float>* dst = nullptr;
    if (name.rfind("adam.m.", 0) == 0) {
      auto it = state.adam.first_moments().find(name.substr(7));
      if (it != state.adam.first_moments().end()) dst = &it->second;
    } else if (name.rfind("adam.v.", 0) == 0) {
      auto it = state.adam.second_moments().find(name.substr(7));
      if (it != state.adam.second_moments().end()) dst = &it->second;
    } else if (auto* p = params.find(name)) {
      dst = &p->value;
    }
    if (dst == nullptr) throw CheckpointError("checkpoint array '" + name + "' does not belong to the model");
    if (dst->rows() != rows || dst->cols() != cols) {
      throw CheckpointError("checkpoint array '" + name + "' has shape " + shape_str(rows, cols) + ", model expects " +
                            shape_str(dst->rows(), dst->cols()));
    }
    r.take(dst->data(), static_cast<std::size_t>(dst->size()) * sizeof(float));
    seen.insert(name);
  }
  if (seen.size() != 3 * params.size()) throw CheckpointError("checkpoint is missing arrays");
  if (r.remaining() != 0) throw CheckpointError("checkpoint has trailing bytes");
  state.adam.set_steps(state.step);
  return state;
}

std::uint64_t state_hash(const TrainState& state) { return fnv1a(serialize(state)); }

}  // namespace srdit::harness
