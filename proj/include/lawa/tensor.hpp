#pragma once

#include <bit>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "lawa/error.hpp"

namespace lawa {

enum class DType { F32, F64 };

inline constexpr std::size_t dtype_size(DType dtype) { return dtype == DType::F32 ? 4 : 8; }

inline constexpr std::string_view dtype_name(DType dtype) { return dtype == DType::F32 ? "F32" : "F64"; }

inline std::optional<DType> parse_dtype(std::string_view name) {
  if (name == "F32") return DType::F32;
  if (name == "F64") return DType::F64;
  return std::nullopt;
}

using Shape = std::vector<std::uint64_t>;

// Product of the dimensions; throws on 64-bit overflow. An empty shape is a scalar.
inline std::uint64_t element_count(const Shape& shape) {
  std::uint64_t n = 1;
  for (auto d : shape) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) {
      throw FormatError("tensor shape overflows 64-bit element count");
    }
    n *= d;
  }
  return n;
}

namespace detail {

inline void store_le(std::byte* out, std::uint64_t bits, std::size_t width) {
  for (std::size_t i = 0; i < width; ++i) out[i] = static_cast<std::byte>((bits >> (8 * i)) & 0xFF);
}

inline std::uint64_t load_le(const std::byte* in, std::size_t width) {
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < width; ++i) bits |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  return bits;
}

}  // namespace detail

// Dense row-major tensor whose payload is kept in its on-disk little-endian
// encoding, so a read/write round trip is bit-exact (NaN payloads included).
class Tensor {
 public:
  Tensor() = default;

  Tensor(DType dtype, Shape shape, std::vector<std::byte> payload)
      : dtype_(dtype), shape_(std::move(shape)), bytes_(std::move(payload)) {
    if (bytes_.size() != element_count(shape_) * dtype_size(dtype_)) {
      throw FormatError("tensor payload size does not match shape");
    }
  }

  // Rounds each value to `dtype` exactly once.
  static Tensor from_values(DType dtype, Shape shape, std::span<const double> values) {
    if (values.size() != element_count(shape)) throw ValidationError("value count does not match shape");
    Tensor t;
    t.dtype_ = dtype;
    t.shape_ = std::move(shape);
    t.bytes_.resize(values.size() * dtype_size(dtype));
    for (std::size_t i = 0; i < values.size(); ++i) t.set(i, values[i]);
    return t;
  }

  static Tensor from_f32(Shape shape, std::span<const float> values) {
    if (values.size() != element_count(shape)) throw ValidationError("value count does not match shape");
    Tensor t;
    t.dtype_ = DType::F32;
    t.shape_ = std::move(shape);
    t.bytes_.resize(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
      detail::store_le(t.bytes_.data() + 4 * i, std::bit_cast<std::uint32_t>(values[i]), 4);
    }
    return t;
  }

  DType dtype() const { return dtype_; }
  const Shape& shape() const { return shape_; }
  std::size_t size() const { return bytes_.size() / dtype_size(dtype_); }
  std::span<const std::byte> bytes() const { return bytes_; }

  // Element i widened to double (exact for F32).
  double at(std::size_t i) const {
    const std::byte* p = bytes_.data() + i * dtype_size(dtype_);
    if (dtype_ == DType::F32) return std::bit_cast<float>(static_cast<std::uint32_t>(detail::load_le(p, 4)));
    return std::bit_cast<double>(detail::load_le(p, 8));
  }

  float f32_at(std::size_t i) const { return static_cast<float>(at(i)); }

  void set(std::size_t i, double value) {
    std::byte* p = bytes_.data() + i * dtype_size(dtype_);
    if (dtype_ == DType::F32) {
      detail::store_le(p, std::bit_cast<std::uint32_t>(static_cast<float>(value)), 4);
    } else {
      detail::store_le(p, std::bit_cast<std::uint64_t>(value), 8);
    }
  }

  std::vector<double> to_f64() const {
    std::vector<double> out(size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = at(i);
    return out;
  }

  std::vector<float> to_f32() const {
    std::vector<float> out(size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f32_at(i);
    return out;
  }

  bool same_layout(const Tensor& other) const { return dtype_ == other.dtype_ && shape_ == other.shape_; }

  // Bitwise equality.
  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  DType dtype_ = DType::F32;
  Shape shape_;
  std::vector<std::byte> bytes_;
};

inline constexpr std::string_view kMetadataKey = "__metadata__";
inline constexpr std::string_view kStepKey = "step";

inline void validate_tensor_name(std::string_view name) {
  if (name.empty()) throw ValidationError("tensor name must not be empty");
  if (name == kMetadataKey) throw ValidationError("tensor name '__metadata__' is reserved");
}

inline std::optional<std::int64_t> parse_step(std::string_view text) {
  std::int64_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size() || value < 0) return std::nullopt;
  return value;
}

// Named tensors plus string metadata. std::map keeps tensors in canonical
// (lexicographic) order.
struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;

  void add(std::string name, Tensor tensor) {
    validate_tensor_name(name);
    auto [it, inserted] = tensors.emplace(std::move(name), std::move(tensor));
    if (!inserted) throw ValidationError("duplicate tensor name '" + it->first + "'");
  }

  const Tensor& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError("unknown tensor '" + name + "'");
    return it->second;
  }

  std::optional<std::int64_t> step() const {
    auto it = metadata.find(std::string(kStepKey));
    if (it == metadata.end()) return std::nullopt;
    return parse_step(it->second);
  }

  void set_step(std::int64_t step) { metadata[std::string(kStepKey)] = std::to_string(step); }

  bool same_tensors(const Checkpoint& other) const { return tensors == other.tensors; }
};

// Throws unless both checkpoints have the same tensor names, dtypes and shapes.
inline void require_same_layout(const Checkpoint& a, const Checkpoint& b) {
  if (a.tensors.size() != b.tensors.size()) throw ValidationError("checkpoints have different tensor sets");
  for (auto ia = a.tensors.begin(), ib = b.tensors.begin(); ia != a.tensors.end(); ++ia, ++ib) {
    if (ia->first != ib->first) throw ValidationError("tensor set mismatch: '" + ia->first + "' vs '" + ib->first + "'");
    if (ia->second.dtype() != ib->second.dtype()) throw ValidationError("dtype mismatch for tensor '" + ia->first + "'");
    if (ia->second.shape() != ib->second.shape()) throw ValidationError("shape mismatch for tensor '" + ia->first + "'");
  }
}

// Shortest round-trip decimal form; used wherever a double lands in text metadata.
inline std::string format_double(double value) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, ptr);
}

}  // namespace lawa
