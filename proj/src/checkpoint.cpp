#include "vitae/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "vitae/error.hpp"

namespace vitae {

using nlohmann::json;

uint32_t crc32(const unsigned char* data, size_t len) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k)
        c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t crc = 0xFFFFFFFFu;
  for (size_t i = 0; i < len; ++i)
    crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

namespace {

constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  out.push_back(char(v & 0xFF));
  out.push_back(char((v >> 8) & 0xFF));
  out.push_back(char((v >> 16) & 0xFF));
  out.push_back(char((v >> 24) & 0xFF));
}

uint32_t get_u32(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 |
         uint32_t(p[3]) << 24;
}

template <typename T>
void append_payload(std::string& out, const Tensor<T>& t) {
  // Little-endian raw values; this writer targets little-endian hosts.
  size_t bytes = size_t(t.numel()) * sizeof(T);
  size_t off = out.size();
  out.resize(off + bytes);
  std::memcpy(out.data() + off, t.data(), bytes);
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model,
                     const OptimizerState<T>* opt, int64_t epoch,
                     uint64_t rng_state) {
  json dir = json::array();
  std::string payload;
  auto add_tensor = [&](const std::string& name, const Tensor<T>& t,
                        bool trainable) {
    json e;
    e["name"] = name;
    e["dtype"] = DtypeTraits<T>::code;
    e["shape"] = t.shape();
    e["trainable"] = trainable;
    dir.push_back(e);
    append_payload(payload, t);
  };
  for (const auto& e : model.params.entries())
    add_tensor(e.name, e.tensor, e.trainable);
  if (opt) {
    for (size_t i = 0; i < opt->names.size(); ++i) {
      add_tensor(opt->names[i] + ".adam_m", opt->m[i], false);
      add_tensor(opt->names[i] + ".adam_v", opt->v[i], false);
    }
  }

  json header;
  header["config"] = model_config_to_json(model.cfg);
  header["epoch"] = epoch;
  header["rng"] = std::to_string(rng_state);
  header["opt_step"] = opt ? opt->step : 0;
  header["tensors"] = dir;
  std::string htext = header.dump();

  std::string out;
  out += "VTAE";
  put_u32(out, kVersion);
  put_u32(out, uint32_t(htext.size()));
  out += htext;
  out += payload;
  put_u32(out, crc32(reinterpret_cast<const unsigned char*>(payload.data()),
                     payload.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("checkpoint: cannot open " + path + " for write");
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw FormatError("checkpoint: short write to " + path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || std::memcmp(p, "VTAE", 4) != 0)
    throw FormatError("checkpoint: bad magic in " + path);
  uint32_t version = get_u32(p + 4);
  if (version != kVersion)
    throw FormatError("checkpoint: unsupported version " +
                      std::to_string(version));
  uint32_t hlen = get_u32(p + 8);
  if (bytes.size() < 12 + size_t(hlen))
    throw FormatError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(12, hlen));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header JSON: ") + e.what());
  }

  Checkpoint<T> ckpt;
  try {
    ckpt.config = model_config_from_json(header.at("config"));
    ckpt.epoch = header.at("epoch").get<int64_t>();
    ckpt.rng_state = std::stoull(header.at("rng").get<std::string>());
    ckpt.opt_step = header.at("opt_step").get<int64_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: incomplete header: ") +
                      e.what());
  }

  size_t off = 12 + hlen;
  size_t payload_len = 0;
  std::vector<std::pair<std::string, std::vector<int64_t>>> entries;
  for (const auto& e : header.at("tensors")) {
    uint32_t dtype = e.at("dtype").get<uint32_t>();
    if (dtype != DtypeTraits<T>::code)
      throw FormatError("checkpoint: tensor " +
                        e.at("name").get<std::string>() + " has dtype code " +
                        std::to_string(dtype) + ", expected " +
                        std::to_string(DtypeTraits<T>::code));
    auto shape = e.at("shape").get<std::vector<int64_t>>();
    entries.emplace_back(e.at("name").get<std::string>(), shape);
    payload_len += size_t(Tensor<T>::count(shape)) * sizeof(T);
  }
  if (bytes.size() != off + payload_len + 4)
    throw FormatError("checkpoint: truncated or oversized payload in " + path);
  uint32_t stored = get_u32(p + off + payload_len);
  uint32_t actual = crc32(p + off, payload_len);
  if (stored != actual)
    throw FormatError("checkpoint: payload checksum mismatch in " + path);

  for (const auto& [name, shape] : entries) {
    Tensor<T> t(shape);
    size_t len = size_t(t.numel()) * sizeof(T);
    std::memcpy(t.data(), bytes.data() + off, len);
    off += len;
    ckpt.tensors.emplace_back(name, std::move(t));
  }
  return ckpt;
}

template <typename T>
void restore_model(Model<T>& model, const Checkpoint<T>& ckpt) {
  for (auto& e : model.params.entries()) {
    const Tensor<T>* src = ckpt.find(e.name);
    if (!src)
      throw DimError("restore_model: checkpoint lacks parameter " + e.name);
    if (src->shape() != e.tensor.shape())
      throw DimError("restore_model: shape disagreement for " + e.name +
                     ": checkpoint " + src->shape_str() + " vs model " +
                     e.tensor.shape_str());
    std::copy(src->data(), src->data() + src->numel(), e.tensor.data());
  }
}

template <typename T>
void restore_optimizer(OptimizerState<T>& opt, const Checkpoint<T>& ckpt) {
  for (size_t i = 0; i < opt.names.size(); ++i) {
    const Tensor<T>* m = ckpt.find(opt.names[i] + ".adam_m");
    const Tensor<T>* v = ckpt.find(opt.names[i] + ".adam_v");
    if (!m || !v)
      throw DimError("restore_optimizer: checkpoint lacks moments for " +
                     opt.names[i]);
    if (m->shape() != opt.m[i].shape() || v->shape() != opt.v[i].shape())
      throw DimError("restore_optimizer: moment shape disagreement for " +
                     opt.names[i]);
    std::copy(m->data(), m->data() + m->numel(), opt.m[i].data());
    std::copy(v->data(), v->data() + v->numel(), opt.v[i].data());
  }
  opt.step = ckpt.opt_step;
}

#define VITAE_INSTANTIATE_CKPT(T)                                           \
  template struct Checkpoint<T>;                                            \
  template void save_checkpoint<T>(const std::string&, const Model<T>&,     \
                                   const OptimizerState<T>*, int64_t,       \
                                   uint64_t);                               \
  template Checkpoint<T> load_checkpoint<T>(const std::string&);            \
  template void restore_model<T>(Model<T>&, const Checkpoint<T>&);          \
  template void restore_optimizer<T>(OptimizerState<T>&,                    \
                                     const Checkpoint<T>&);

VITAE_INSTANTIATE_CKPT(float)
VITAE_INSTANTIATE_CKPT(double)

}  // namespace vitae
