// Binary checkpoints:
//   "W2WB" | u32 version | u32 count |
//   count x (u32 name_len | name | u8 dtype | u32 rank | rank x u64 dim | values) |
//   u64 FNV-1a of every preceding byte
// All integers and values little-endian; dtype 0 = f32, 1 = f64.
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "w2w/optim.hpp"
#include "w2w/params.hpp"

namespace w2w {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

// One stored tensor; values held as f64 regardless of dtype (f32 -> f64 is exact).
struct StoredTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;
};

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    std::uint8_t raw[sizeof(U)];
    std::memcpy(raw, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    bytes.insert(bytes.end(), raw, raw + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, std::size_t begin, std::size_t end, std::string source)
      : bytes_(bytes), pos_(begin), end_(end), source_(std::move(source)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    std::uint8_t raw[sizeof(U)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, raw, sizeof(U));
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError(source_ + ": truncated checkpoint");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_, end_;
  std::string source_;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<StoredTensor>& tensors) {
  detail::ByteWriter w;
  w.put_bytes("W2WB", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (shape_numel(t.shape) != t.values.size()) throw DimensionError("checkpoint: " + t.name + " size mismatch");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.put<std::uint64_t>(d);
    for (double v : t.values) {
      if (t.dtype == DType::f32) w.put<float>(static_cast<float>(v));
      else w.put<double>(v);
    }
  }
  w.put<std::uint64_t>(fnv1a64(w.bytes.data(), w.bytes.size()));
  return w.bytes;
}

inline std::vector<StoredTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes,
                                                   const std::string& source = "checkpoint") {
  if (bytes.size() < 4 + 4 + 4 + 8 || std::memcmp(bytes.data(), "W2WB", 4) != 0) {
    throw CheckpointError(source + ": not a W2WB checkpoint");
  }
  const std::size_t body = bytes.size() - 8;
  const auto stored = detail::ByteReader(bytes, body, bytes.size(), source).get<std::uint64_t>();
  if (stored != fnv1a64(bytes.data(), body)) throw CheckpointError(source + ": checksum mismatch");

  detail::ByteReader r(bytes, 0, body, source);
  r.get_string(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(source + ": unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<StoredTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.get_string(r.get<std::uint32_t>());
    const auto code = r.get<std::uint8_t>();
    if (code > 1) throw CheckpointError(source + ": unknown dtype " + std::to_string(code) + " for " + t.name);
    t.dtype = static_cast<DType>(code);
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    t.values.resize(shape_numel(t.shape));
    for (auto& v : t.values) v = t.dtype == DType::f32 ? static_cast<double>(r.get<float>()) : r.get<double>();
    out.push_back(std::move(t));
  }
  if (r.pos() != body) throw CheckpointError(source + ": trailing bytes before checksum");
  return out;
}

inline void write_checkpoint(const std::filesystem::path& path, const std::vector<StoredTensor>& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<StoredTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

template <typename T>
void append_store(std::vector<StoredTensor>& out, const ParamStore<T>& store) {
  for (const auto& [name, t] : store.entries()) {
    out.push_back({name, dtype_of<T>(), t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }
}

// Fills every parameter of `store` from the matching stored tensor. Names,
// shapes and dtypes must agree; extra stored tensors are ignored.
template <typename T>
void restore_store(ParamStore<T>& store, const std::vector<StoredTensor>& tensors) {
  for (const auto& [name, t] : store.entries()) {
    const auto it = std::find_if(tensors.begin(), tensors.end(), [&](const StoredTensor& s) { return s.name == name; });
    if (it == tensors.end()) throw CheckpointError("checkpoint lacks tensor " + name);
    if (it->shape != t.shape()) {
      throw CheckpointError("checkpoint tensor " + name + " has shape " + shape_str(it->shape) + ", model expects " +
                            shape_str(t.shape()));
    }
    if (it->dtype != dtype_of<T>()) throw CheckpointError("checkpoint tensor " + name + " has the wrong dtype");
    Tensor<T> target = t;
    auto dst = target.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->values[i]);
  }
}

// Parameters, optionally followed by the optimizer moments and step count.
template <typename T>
std::vector<StoredTensor> snapshot(const ParamStore<T>& params, const AdamW<T>* optimizer = nullptr) {
  std::vector<StoredTensor> out;
  append_store(out, params);
  if (optimizer != nullptr) {
    append_store(out, optimizer->first_moments());
    append_store(out, optimizer->second_moments());
    out.push_back({"adam.step", DType::f64, {1}, {static_cast<double>(optimizer->steps())}});
  }
  return out;
}

inline bool has_optimizer_state(const std::vector<StoredTensor>& tensors) {
  return std::any_of(tensors.begin(), tensors.end(), [](const StoredTensor& s) { return s.name == "adam.step"; });
}

template <typename T>
void restore_optimizer(AdamW<T>& optimizer, const std::vector<StoredTensor>& tensors) {
  restore_store(optimizer.first_moments_mut(), tensors);
  restore_store(optimizer.second_moments_mut(), tensors);
  const auto it =
      std::find_if(tensors.begin(), tensors.end(), [](const StoredTensor& s) { return s.name == "adam.step"; });
  if (it == tensors.end()) throw CheckpointError("checkpoint lacks optimizer state");
  optimizer.set_steps(static_cast<std::size_t>(it->values.at(0)));
}

}  // namespace w2w
