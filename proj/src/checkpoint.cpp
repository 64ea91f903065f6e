#include "moelab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "moelab/error.hpp"

namespace moelab {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'M', 'O', 'E', 'L', 'A', 'B', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void bytes(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_ += s;
  }
  void doubles(const Tensor& t) {
    out_.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Tensor tensor(Shape shape) {
    const std::size_t n = numel(shape);
    need(n * sizeof(double));
    std::vector<double> data(n);
    if (n != 0) std::memcpy(data.data(), in_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return Tensor(std::move(shape), std::move(data));
  }
  [[nodiscard]] bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > in_.size() - pos_) throw IoError("checkpoint truncated");
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  Writer w;
  for (char c : kMagic) w.pod(c);
  w.pod(kVersion);
  w.bytes(nlohmann::json(ck.config).dump());
  w.pod<std::uint64_t>(ck.step);
  w.pod<std::uint64_t>(ck.params.size());
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const Tensor& t = ck.params.value(i);
    w.bytes(ck.params.name(i));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.pod<std::uint64_t>(d);
    w.doubles(t);
  }
  w.pod<std::uint8_t>(ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    const OptimizerState& s = *ck.optimizer;
    if (s.m.size() != ck.params.size() || s.v.size() != ck.params.size()) {
      throw ConfigError("checkpoint: optimizer state does not match parameter count");
    }
    w.pod(s.config.lr);
    w.pod(s.config.beta1);
    w.pod(s.config.beta2);
    w.pod(s.config.eps);
    w.pod(s.config.weight_decay);
    w.pod<std::uint64_t>(s.step);
    for (std::size_t i = 0; i < s.m.size(); ++i) {
      const bool present = !s.m[i].empty();
      w.pod<std::uint8_t>(present ? 1 : 0);
      if (present) {
        w.doubles(s.m[i]);
        w.doubles(s.v[i]);
      }
    }
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  for (char c : kMagic) {
    if (r.pod<char>() != c) throw IoError("not a moelab checkpoint (bad magic)");
  }
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  try {
    ck.config = nlohmann::json::parse(r.bytes()).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  ck.step = r.pod<std::uint64_t>();
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.bytes();
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw IoError("checkpoint tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.pod<std::uint64_t>();
    ck.params.add(std::move(name), r.tensor(std::move(shape)));
  }
  if (r.pod<std::uint8_t>() != 0) {
    OptimizerState s;
    s.config.lr = r.pod<double>();
    s.config.beta1 = r.pod<double>();
    s.config.beta2 = r.pod<double>();
    s.config.eps = r.pod<double>();
    s.config.weight_decay = r.pod<double>();
    s.step = r.pod<std::uint64_t>();
    s.m.resize(ck.params.size());
    s.v.resize(ck.params.size());
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      if (r.pod<std::uint8_t>() == 0) continue;
      s.m[i] = r.tensor(ck.params.value(i).shape());
      s.v[i] = r.tensor(ck.params.value(i).shape());
    }
    ck.optimizer = std::move(s);
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint payload");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  // Write-then-rename so an interrupted save never leaves a torn file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write on checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace moelab
