#include "mldg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mldg/error.hpp"

namespace mldg {

namespace {

constexpr char kMagic[8] = {'M', 'L', 'D', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : os_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!os_) fail(ErrorKind::io, "cannot write " + path.string());
  }
  template <typename T>
  void pod(const T& v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void shape(const Shape& shape) {
    pod(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) pod(static_cast<std::uint64_t>(d));
  }
  void payload(const Tensor& t) {
    os_.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  void raw(const char* p, std::size_t n) { os_.write(p, static_cast<std::streamsize>(n)); }
  void finish() {
    os_.flush();
    if (!os_) fail(ErrorKind::io, "write failed: " + path_.string());
  }

 private:
  std::ofstream os_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : is_(path, std::ios::binary), path_(path) {
    if (!is_) fail(ErrorKind::data, "missing checkpoint " + path.string());
  }
  template <typename T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is_) truncated();
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > (1u << 20)) fail(ErrorKind::data, "checkpoint " + path_.string() + ": oversized string");
    std::string s(n, '\0');
    is_.read(s.data(), n);
    if (!is_) truncated();
    return s;
  }
  Shape shape() {
    const auto ndim = pod<std::uint32_t>();
    if (ndim == 0 || ndim > 8) fail(ErrorKind::data, "checkpoint " + path_.string() + ": bad ndim");
    Shape s;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      const auto d = pod<std::uint64_t>();
      if (d == 0 || d > (1u << 26)) fail(ErrorKind::data, "checkpoint " + path_.string() + ": bad dimension");
      s.push_back(static_cast<std::size_t>(d));
    }
    return s;
  }
  Tensor payload(Shape shape) {
    std::vector<double> data(shape_size(shape));
    is_.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is_) truncated();
    return Tensor(std::move(shape), std::move(data));
  }
  void raw(char* p, std::size_t n) {
    is_.read(p, static_cast<std::streamsize>(n));
    if (!is_) truncated();
  }
  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  [[noreturn]] void truncated() { fail(ErrorKind::data, "checkpoint " + path_.string() + ": truncated"); }

  std::ifstream is_;
  std::filesystem::path path_;
};

nlohmann::json meta_to_json(const CheckpointMeta& m) {
  nlohmann::json j;
  j["model"] = {{"n_layers", m.config.n_layers}, {"d_model", m.config.d_model},
                {"n_heads", m.config.n_heads},   {"d_ff", m.config.d_ff},
                {"seq_len", m.config.seq_len},   {"head_hidden", m.config.head_hidden}};
  j["rank"] = m.options.rank ? nlohmann::json(*m.options.rank) : nlohmann::json(nullptr);
  j["freeze_base"] = m.options.freeze_base;
  j["lora_scale"] = m.options.lora_scale;
  j["lora_init_std"] = m.options.lora_init_std;
  j["method"] = m.method;
  j["epoch"] = m.epoch;
  return j;
}

void meta_from_json(const nlohmann::json& j, CheckpointMeta& m) {
  const auto& mc = j.at("model");
  m.config.n_layers = mc.at("n_layers");
  m.config.d_model = mc.at("d_model");
  m.config.n_heads = mc.at("n_heads");
  m.config.d_ff = mc.at("d_ff");
  m.config.seq_len = mc.at("seq_len");
  m.config.head_hidden = mc.at("head_hidden");
  if (j.at("rank").is_null()) {
    m.options.rank.reset();
  } else {
    m.options.rank = j.at("rank").get<int>();
  }
  m.options.freeze_base = j.at("freeze_base");
  m.options.lora_scale = j.at("lora_scale");
  m.options.lora_init_std = j.at("lora_init_std");
  m.method = j.at("method");
  m.epoch = j.at("epoch");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  Writer w(path);
  w.raw(kMagic, sizeof(kMagic));
  w.pod(kVersion);
  w.pod(ck.meta.config_hash);
  w.pod(ck.meta.seed);
  w.str(meta_to_json(ck.meta).dump());
  w.pod(static_cast<std::uint64_t>(ck.params.size()));
  for (const auto& e : ck.params.entries()) {
    w.str(e.name);
    w.pod(static_cast<std::uint8_t>(e.trainable ? 1 : 0));
    w.shape(e.value.shape());
    w.payload(e.value);
  }
  w.pod(static_cast<std::uint8_t>(ck.optimizer ? 1 : 0));
  if (ck.optimizer) {
    const auto& o = ck.optimizer->options();
    w.pod(o.beta1);
    w.pod(o.beta2);
    w.pod(o.eps);
    w.pod(o.weight_decay);
    w.pod(ck.optimizer->step_count());
    w.pod(static_cast<std::uint64_t>(ck.optimizer->moments().size()));
    for (const auto& [name, mom] : ck.optimizer->moments()) {
      w.str(name);
      w.shape(mom.m.shape());
      w.payload(mom.m);
      w.payload(mom.v);
    }
  }
  w.finish();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.raw(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    fail(ErrorKind::data, "checkpoint " + path.string() + ": bad magic");
  }
  if (const auto v = r.pod<std::uint32_t>(); v != kVersion) {
    fail(ErrorKind::data, "checkpoint " + path.string() + ": unsupported version " + std::to_string(v));
  }
  Checkpoint ck;
  ck.meta.config_hash = r.pod<std::uint64_t>();
  ck.meta.seed = r.pod<std::uint64_t>();
  try {
    meta_from_json(nlohmann::json::parse(r.str()), ck.meta);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, "checkpoint " + path.string() + ": bad metadata: " + e.what());
  }
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const bool trainable = r.pod<std::uint8_t>() != 0;
    Tensor value = r.payload(r.shape());
    ck.params.add(std::move(name), std::move(value), trainable);
  }
  if (r.pod<std::uint8_t>() != 0) {
    AdamWOptions o;
    o.beta1 = r.pod<double>();
    o.beta2 = r.pod<double>();
    o.eps = r.pod<double>();
    o.weight_decay = r.pod<double>();
    const auto step = r.pod<std::uint64_t>();
    const auto n = r.pod<std::uint64_t>();
    std::map<std::string, AdamW::Moments> moments;
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string name = r.str();
      Shape shape = r.shape();
      Tensor m = r.payload(shape);
      Tensor v = r.payload(shape);
      moments.emplace(std::move(name), AdamW::Moments{std::move(m), std::move(v)});
    }
    AdamW opt(o);
    opt.restore(step, std::move(moments));
    ck.optimizer = std::move(opt);
  }
  if (!r.at_end()) fail(ErrorKind::data, "checkpoint " + path.string() + ": trailing bytes");
  return ck;
}

Model model_from_checkpoint(const Checkpoint& ck) {
  Encoder encoder(ck.meta.config, ck.meta.options);
  // Validate that the stored tensors match the architecture.
  const ParamStore expected = encoder.init_params(0);
  if (expected.size() != ck.params.size()) {
    fail(ErrorKind::data, "checkpoint: " + std::to_string(ck.params.size()) + " tensors, architecture expects " +
                              std::to_string(expected.size()));
  }
  for (const auto& e : expected.entries()) {
    if (!ck.params.contains(e.name)) fail(ErrorKind::data, "checkpoint: missing tensor '" + e.name + "'");
    const auto& got = ck.params.entry(e.name);
    if (got.value.shape() != e.value.shape() || got.trainable != e.trainable) {
      fail(ErrorKind::data, "checkpoint: tensor '" + e.name + "' does not match the architecture");
    }
  }
  return {std::move(encoder), ck.params};
}

}  // namespace mldg
