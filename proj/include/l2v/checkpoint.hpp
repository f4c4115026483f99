#pragma once

// Checkpoint container (all integers little-endian):
//
//   "L2V1"                      magic
//   u32  version = 1
//   u64  n, then n bytes        UTF-8 JSON header (model config, LoRA settings, meta)
//   repeated:
//     u16  name length (0 terminates)
//     name bytes
//     u8   rank
//     u64  dims[rank]
//     f32  data, row-major
//   u32  CRC-32 of every preceding byte
//
// Adapter tensors are stored as "lora.<target>.A" / "lora.<target>.B".

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "l2v/error.hpp"
#include "l2v/lora.hpp"
#include "l2v/tensor.hpp"
#include "l2v/transformer.hpp"

namespace l2v {

inline constexpr char kCheckpointMagic[4] = {'L', '2', 'V', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

/// Header JSON plus named f32 tensors in file order.
struct RawCheckpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes, std::size_t limit)
      : bytes_(bytes), limit_(limit) {}

  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return value;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    need(n, what);
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t offset() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (n > limit_ - pos_) throw CorruptCheckpointError(pos_, std::string("truncated ") + what);
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void write_checkpoint(const std::string& path, const RawCheckpoint& ckpt) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string header = ckpt.header.dump();
  w.put<std::uint64_t>(header.size());
  w.put_bytes(header.data(), header.size());
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.empty() || name.size() > 0xFFFF) throw Error("checkpoint tensor name length out of range");
    if (t.rank() > 0xFF) throw Error("checkpoint tensor rank out of range");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint64_t>(d);
    w.put_bytes(t.data().data(), t.numel() * sizeof(float));
  }
  w.put<std::uint16_t>(0);
  const std::uint32_t crc = crc32_of(w.bytes().data(), w.bytes().size());
  w.put<std::uint32_t>(crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw Error("failed writing checkpoint " + path);
}

inline RawCheckpoint read_checkpoint_bytes(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw CorruptCheckpointError(0, "file shorter than magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw CorruptCheckpointError(0, "bad magic");
  if (bytes.size() < 4 + 4 + 8 + 2 + 4) throw CorruptCheckpointError(bytes.size(), "truncated header");
  const std::size_t body = bytes.size() - 4;
  detail::ByteReader r(bytes, body);
  r.take(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CorruptCheckpointError(4, "unsupported version " + std::to_string(version));
  }
  const auto header_len = r.get<std::uint64_t>("header length");
  const std::size_t header_at = r.offset();
  if (header_len > body - header_at) throw CorruptCheckpointError(header_at, "truncated JSON header");
  const auto* hp = r.take(static_cast<std::size_t>(header_len), "JSON header");
  RawCheckpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(hp, hp + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpointError(header_at, std::string("invalid JSON header: ") + e.what());
  }
  for (;;) {
    const std::size_t rec = r.offset();
    const auto name_len = r.get<std::uint16_t>("record name length");
    if (name_len == 0) break;
    const auto* np = r.take(name_len, "record name");
    std::string name(reinterpret_cast<const char*>(np), name_len);
    const auto rank = r.get<std::uint8_t>("record rank");
    Shape shape;
    std::size_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>("record dims");
      if (d == 0 || d > (std::uint64_t{1} << 40)) throw CorruptCheckpointError(r.offset() - 8, "bad dimension");
      shape.push_back(static_cast<std::size_t>(d));
      n *= static_cast<std::size_t>(d);
      if (n > (std::size_t{1} << 40)) throw CorruptCheckpointError(rec, "tensor too large");
    }
    if (rank == 0) throw CorruptCheckpointError(rec, "zero-rank record");
    std::vector<float> data(n);
    const auto* dp = r.take(n * sizeof(float), "tensor data");
    std::memcpy(data.data(), dp, n * sizeof(float));
    ckpt.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  if (r.offset() != body) throw CorruptCheckpointError(r.offset(), "trailing bytes before CRC");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (crc32_of(bytes.data(), body) != stored) throw CorruptCheckpointError(body, "CRC mismatch");
  return ckpt;
}

inline RawCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return read_checkpoint_bytes(bytes);
}

/// A model checkpoint: config, weights, optional adapters and free-form meta.
struct LoadedCheckpoint {
  ModelConfig config;
  Model<float> model;
  std::optional<LoraSettings> lora;
  std::map<std::string, LoraAdapter<float>> adapters;
  nlohmann::json meta = nlohmann::json::object();

  /// The base with adapters attached (requires saved adapters).
  AdaptedModel<float> adapted() const {
    if (!lora) throw Error("checkpoint holds no LoRA adapters");
    std::map<std::string, LoraAdapter<float>> copy;
    for (const auto& [name, ad] : adapters) copy.emplace(name, LoraAdapter<float>{ad.a.clone(), ad.b.clone()});
    return AdaptedModel<float>(model.clone(), *lora, std::move(copy));
  }
};

namespace detail {

template <class T>
Tensor<float> as_f32(const Tensor<T>& t) {
  if constexpr (std::is_same_v<T, float>) return t;
  else return t.template cast<float>();
}

template <class T>
RawCheckpoint to_raw(const Model<T>& model, const LoraSettings* lora,
                     const std::map<std::string, LoraAdapter<T>>* adapters, const nlohmann::json& meta) {
  RawCheckpoint raw;
  raw.header = {{"format", "l2v-checkpoint"}, {"model", model.config()}, {"meta", meta}};
  for (const auto& [name, shape] : weight_layout(model.config())) {
    raw.tensors.emplace_back(name, as_f32(model.weight(name)));
  }
  if (lora && adapters) {
    raw.header["lora"] = {{"rank", lora->rank}, {"alpha", lora->alpha}, {"targets", lora->targets}};
    for (const auto& [name, ad] : *adapters) {
      raw.tensors.emplace_back("lora." + name + ".A", as_f32(ad.a));
      raw.tensors.emplace_back("lora." + name + ".B", as_f32(ad.b));
    }
  }
  return raw;
}

}  // namespace detail

template <class T>
void save_checkpoint(const Model<T>& model, const std::string& path,
                     const nlohmann::json& meta = nlohmann::json::object()) {
  write_checkpoint(path, detail::to_raw<T>(model, nullptr, nullptr, meta));
}

template <class T>
void save_checkpoint(const AdaptedModel<T>& model, const std::string& path,
                     const nlohmann::json& meta = nlohmann::json::object()) {
  write_checkpoint(path, detail::to_raw<T>(model.base(), &model.settings(), &model.adapters(), meta));
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  RawCheckpoint raw = read_checkpoint(path);
  LoadedCheckpoint out;
  try {
    out.config = raw.header.at("model").get<ModelConfig>();
    if (raw.header.contains("meta")) out.meta = raw.header.at("meta");
    if (raw.header.contains("lora")) {
      const auto& l = raw.header.at("lora");
      out.lora = LoraSettings{l.at("rank").get<std::size_t>(), l.at("alpha").get<double>(),
                              l.at("targets").get<std::vector<std::string>>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpointError(16, std::string("bad header fields: ") + e.what());
  }
  std::map<std::string, Tensor<float>> weights;
  std::map<std::string, Tensor<float>> lora_a, lora_b;
  for (auto& [name, t] : raw.tensors) {
    if (name.starts_with("lora.")) {
      const std::string rest = name.substr(5);
      if (rest.ends_with(".A")) lora_a.emplace(rest.substr(0, rest.size() - 2), t);
      else if (rest.ends_with(".B")) lora_b.emplace(rest.substr(0, rest.size() - 2), t);
      else throw NameError("unrecognized adapter record '" + name + "'");
      continue;
    }
    t.set_requires_grad(true);
    if (!weights.emplace(name, t).second) throw NameError("duplicate weight '" + name + "'");
  }
  out.model = Model<float>(out.config, std::move(weights));
  if (out.lora) {
    for (const auto& target : out.lora->targets) {
      auto a = lora_a.find(target);
      auto b = lora_b.find(target);
      if (a == lora_a.end() || b == lora_b.end()) throw NameError("missing adapter for '" + target + "'");
      out.adapters.emplace(target, LoraAdapter<float>{a->second, b->second});
    }
  } else if (!lora_a.empty() || !lora_b.empty()) {
    throw NameError("adapter records present without LoRA settings");
  }
  return out;
}

}  // namespace l2v
