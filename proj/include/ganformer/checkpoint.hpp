#pragma once

// Binary checkpoints (little-endian):
//   "GNFR" u32 version u32 count
//   count x { u32 name_len, name, u8 dtype(0 = f32), u8 rank, u32 dims[rank], f32 data }
//   u64 step, 4 x u64 RNG state
// Tensors are matched by name when loading into a state built from config.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "ganformer/errors.hpp"
#include "ganformer/training.hpp"

namespace ganformer {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

struct NamedBuffer {
  std::string name;
  Shape shape;
  std::vector<float>* data = nullptr;  // moments
  Tensor<float>* tensor = nullptr;     // parameters
  std::span<float> values() const { return tensor ? tensor->mutable_data() : std::span<float>(*data); }
};

inline std::vector<NamedBuffer> checkpoint_layout(TrainState& s) {
  std::vector<NamedBuffer> out;
  const auto g = s.g_params();
  const auto d = s.d_params();
  for (const auto& e : g) out.push_back({e.name, e.tensor->shape(), nullptr, e.tensor});
  for (const auto& e : d) out.push_back({e.name, e.tensor->shape(), nullptr, e.tensor});
  for (const auto& e : s.ema_params()) out.push_back({"ema/" + e.name, e.tensor->shape(), nullptr, e.tensor});
  for (std::size_t i = 0; i < g.size(); ++i) {
    out.push_back({"adam_m/" + g.entries()[i].name, g.entries()[i].tensor->shape(), &s.g_adam[i].m, nullptr});
    out.push_back({"adam_v/" + g.entries()[i].name, g.entries()[i].tensor->shape(), &s.g_adam[i].v, nullptr});
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    out.push_back({"adam_m/" + d.entries()[i].name, d.entries()[i].tensor->shape(), &s.d_adam[i].m, nullptr});
    out.push_back({"adam_v/" + d.entries()[i].name, d.entries()[i].tensor->shape(), &s.d_adam[i].v, nullptr});
  }
  return out;
}

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
  }
  std::string take() { return std::move(bytes_); }

 private:
  std::string bytes_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    U v;
    get_bytes(&v, sizeof(U), what);
    return v;
  }
  void get_bytes(void* out, std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw FormatError(std::string("truncated checkpoint: ") + what + " at offset " + std::to_string(pos_));
    }
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string checkpoint_bytes(TrainState& s) {
  const auto layout = detail::checkpoint_layout(s);
  detail::Writer w;
  w.put_bytes("GNFR", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(layout.size()));
  for (const auto& b : layout) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.name.size()));
    w.put_bytes(b.name.data(), b.name.size());
    w.put<std::uint8_t>(0);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(b.shape.size()));
    for (const std::size_t dim : b.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(dim));
    const auto v = b.values();
    w.put_bytes(v.data(), v.size() * sizeof(float));
  }
  w.put<std::uint64_t>(s.step);
  for (const std::uint64_t word : s.rng.state()) w.put<std::uint64_t>(word);
  return w.take();
}

/// Fills a state built from the same configs. Every tensor must be present
/// with a matching shape; unknown names are rejected.
inline void restore_checkpoint(TrainState& s, const std::string& bytes) {
  detail::Reader r(bytes);
  char magic[4];
  r.get_bytes(magic, 4, "magic");
  if (std::memcmp(magic, "GNFR", 4) != 0) throw FormatError("bad checkpoint magic at offset 0");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " at offset 4");
  }
  const auto count = r.get<std::uint32_t>("tensor count");

  auto layout = detail::checkpoint_layout(s);
  std::map<std::string, detail::NamedBuffer*> by_name;
  for (auto& b : layout) by_name[b.name] = &b;
  if (count != layout.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, config expects " +
                      std::to_string(layout.size()) + " (offset 8)");
  }
  std::map<std::string, bool> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::size_t at = r.offset();
    const auto len = r.get<std::uint32_t>("name length");
    if (len > 4096) throw FormatError("implausible name length at offset " + std::to_string(at));
    std::string name(len, '\0');
    r.get_bytes(name.data(), len, "name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != 0) throw FormatError("unsupported dtype " + std::to_string(dtype) + " at offset " + std::to_string(r.offset() - 1));
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& dim : shape) dim = r.get<std::uint32_t>("dims");
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("unknown tensor '" + name + "' at offset " + std::to_string(at));
    if (seen[name]) throw FormatError("duplicate tensor '" + name + "' at offset " + std::to_string(at));
    seen[name] = true;
    if (it->second->shape != shape) {
      throw FormatError("tensor '" + name + "' has shape " + shape_string(shape) + ", config expects " +
                        shape_string(it->second->shape) + " (offset " + std::to_string(at) + ")");
    }
    const auto dst = it->second->values();
    r.get_bytes(dst.data(), dst.size() * sizeof(float), "tensor data");
  }
  s.step = r.get<std::uint64_t>("step");
  Rng::State st;
  for (auto& word : st) word = r.get<std::uint64_t>("rng state");
  s.rng.set_state(st);
  if (!r.done()) throw FormatError("trailing bytes at offset " + std::to_string(r.offset()));
}

inline void checkpoint_save(TrainState& s, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const std::string bytes = checkpoint_bytes(s);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline TrainState checkpoint_load(const std::filesystem::path& path, const GeneratorConfig& net,
                                  const TrainConfig& train) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  TrainState s = make_train_state(net, train);
  restore_checkpoint(s, bytes);
  return s;
}

}  // namespace ganformer
