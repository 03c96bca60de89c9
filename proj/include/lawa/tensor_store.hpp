#pragma once

// Checkpoint container:
//   bytes [0, 8)      little-endian u64 header length L
//   bytes [8, 8 + L)  UTF-8 JSON: name -> {"data_offsets","dtype","shape"}, plus
//                     an optional "__metadata__" string map
//   bytes [8 + L, ..) data region; offsets are relative to its start
// Headers are written with sorted keys and no whitespace, so serialization is
// a pure function of checkpoint content.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lawa/error.hpp"
#include "lawa/tensor.hpp"

namespace lawa {

namespace fs = std::filesystem;

struct TensorMeta {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;

  std::uint64_t byte_size() const { return end - begin; }
  bool operator==(const TensorMeta&) const = default;
};

struct ContainerHeader {
  std::vector<TensorMeta> tensors;  // canonical order
  std::map<std::string, std::string> metadata;
  std::uint64_t data_start = 0;
  std::uint64_t data_size = 0;

  const TensorMeta* find(std::string_view name) const {
    auto it = std::lower_bound(tensors.begin(), tensors.end(), name,
                               [](const TensorMeta& m, std::string_view n) { return m.name < n; });
    return it != tensors.end() && it->name == name ? &*it : nullptr;
  }

  std::optional<std::int64_t> step() const {
    auto it = metadata.find(std::string(kStepKey));
    return it == metadata.end() ? std::nullopt : parse_step(it->second);
  }
};

// Largest header we agree to parse.
inline constexpr std::uint64_t kMaxHeaderBytes = 100ull << 20;

namespace detail {

inline std::uint64_t json_u64(const nlohmann::json& j, const std::string& what) {
  if (!j.is_number_unsigned()) throw FormatError(what + " must be a non-negative integer");
  return j.get<std::uint64_t>();
}

inline TensorMeta parse_tensor_entry(const std::string& name, const nlohmann::json& entry) {
  if (!entry.is_object()) throw FormatError("header entry '" + name + "' is not an object");
  TensorMeta meta;
  meta.name = name;

  auto dtype_it = entry.find("dtype");
  if (dtype_it == entry.end() || !dtype_it->is_string()) throw FormatError("tensor '" + name + "' has no dtype");
  auto dtype = parse_dtype(dtype_it->get<std::string>());
  if (!dtype) throw FormatError("tensor '" + name + "' has unsupported dtype " + dtype_it->get<std::string>());
  meta.dtype = *dtype;

  auto shape_it = entry.find("shape");
  if (shape_it == entry.end() || !shape_it->is_array()) throw FormatError("tensor '" + name + "' has no shape");
  for (const auto& d : *shape_it) meta.shape.push_back(json_u64(d, "shape dimension of '" + name + "'"));

  auto off_it = entry.find("data_offsets");
  if (off_it == entry.end() || !off_it->is_array() || off_it->size() != 2) {
    throw FormatError("tensor '" + name + "' needs data_offsets [begin, end]");
  }
  meta.begin = json_u64((*off_it)[0], "data_offsets of '" + name + "'");
  meta.end = json_u64((*off_it)[1], "data_offsets of '" + name + "'");
  if (meta.end < meta.begin) throw FormatError("tensor '" + name + "' has reversed data_offsets");
  std::uint64_t count = element_count(meta.shape);
  if (count > (std::numeric_limits<std::uint64_t>::max)() / dtype_size(meta.dtype) ||
      meta.end - meta.begin != count * dtype_size(meta.dtype)) {
    throw FormatError("tensor '" + name + "' byte range does not match shape and dtype");
  }
  return meta;
}

}  // namespace detail

// Parses and validates a header. `data_size` is the number of bytes that
// follow the header in the file.
inline ContainerHeader parse_header(std::string_view text, std::uint64_t data_size) {
  std::set<std::string> seen;
  std::string duplicate;
  nlohmann::json::parser_callback_t on_event = [&](int depth, nlohmann::json::parse_event_t event,
                                                   nlohmann::json& parsed) {
    if (event == nlohmann::json::parse_event_t::key && depth == 1) {
      auto key = parsed.get<std::string>();
      if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
    }
    return true;
  };

  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text.begin(), text.end(), on_event);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("invalid header JSON: ") + e.what());
  }
  if (!doc.is_object()) throw FormatError("header is not a JSON object");
  if (!duplicate.empty()) throw FormatError("duplicate tensor name '" + duplicate + "' in header");

  ContainerHeader header;
  header.data_size = data_size;
  for (const auto& [key, value] : doc.items()) {
    if (key == kMetadataKey) {
      if (!value.is_object()) throw FormatError("__metadata__ must be an object");
      for (const auto& [mk, mv] : value.items()) {
        if (!mv.is_string()) throw FormatError("__metadata__ value for '" + mk + "' must be a string");
        header.metadata.emplace(mk, mv.get<std::string>());
      }
      continue;
    }
    if (key.empty()) throw FormatError("empty tensor name in header");
    header.tensors.push_back(detail::parse_tensor_entry(key, value));
  }
  if (auto it = header.metadata.find(std::string(kStepKey)); it != header.metadata.end() && !parse_step(it->second)) {
    throw FormatError("metadata step '" + it->second + "' is not a non-negative integer");
  }

  // json objects iterate in sorted key order, which is the canonical order.
  std::vector<const TensorMeta*> by_offset;
  for (const auto& m : header.tensors) {
    if (m.end > data_size) throw FormatError("truncated data region (tensor '" + m.name + "')");
    by_offset.push_back(&m);
  }
  std::sort(by_offset.begin(), by_offset.end(),
            [](const TensorMeta* a, const TensorMeta* b) { return a->begin < b->begin; });
  for (std::size_t i = 1; i < by_offset.size(); ++i) {
    if (by_offset[i]->begin < by_offset[i - 1]->end) {
      throw FormatError("overlapping data ranges for '" + by_offset[i - 1]->name + "' and '" + by_offset[i]->name + "'");
    }
  }
  return header;
}

inline std::string encode_header(const std::vector<TensorMeta>& tensors,
                                 const std::map<std::string, std::string>& metadata) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& m : tensors) {
    nlohmann::json shape = nlohmann::json::array();
    for (auto d : m.shape) shape.push_back(d);
    doc[m.name] = {{"dtype", std::string(dtype_name(m.dtype))},
                   {"shape", std::move(shape)},
                   {"data_offsets", nlohmann::json::array({m.begin, m.end})}};
  }
  if (!metadata.empty()) doc[std::string(kMetadataKey)] = metadata;
  try {
    return doc.dump();
  } catch (const nlohmann::json::type_error& e) {
    throw ValidationError(std::string("tensor names and metadata must be valid UTF-8: ") + e.what());
  }
}

// Reads the header once and then individual tensors on demand; only the
// requested byte range is read. One reader per thread.
class CheckpointReader {
 public:
  explicit CheckpointReader(fs::path path) : path_(std::move(path)), in_(path_, std::ios::binary) {
    if (!in_) throw Error("cannot open checkpoint " + path_.string());
    std::error_code ec;
    const std::uint64_t file_size = fs::file_size(path_, ec);
    if (ec) throw Error("cannot stat checkpoint " + path_.string());
    if (file_size < 8) throw FormatError("malformed header length in " + path_.string() + " (file too short)");

    std::byte prefix[8];
    in_.read(reinterpret_cast<char*>(prefix), 8);
    const std::uint64_t header_len = detail::load_le(prefix, 8);
    if (header_len > kMaxHeaderBytes || header_len > file_size - 8) {
      throw FormatError("malformed header length in " + path_.string());
    }
    std::string text(header_len, '\0');
    in_.read(text.data(), static_cast<std::streamsize>(header_len));
    if (!in_) throw FormatError("malformed header length in " + path_.string());
    header_ = parse_header(text, file_size - 8 - header_len);
    header_.data_start = 8 + header_len;
  }

  const fs::path& path() const { return path_; }
  const ContainerHeader& header() const { return header_; }

  Tensor read(std::string_view name) {
    const TensorMeta* meta = header_.find(name);
    if (!meta) throw ValidationError("unknown tensor '" + std::string(name) + "' in " + path_.string());
    return read(*meta);
  }

  Tensor read(const TensorMeta& meta) {
    std::vector<std::byte> payload(meta.byte_size());
    in_.seekg(static_cast<std::streamoff>(header_.data_start + meta.begin));
    in_.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!in_) throw FormatError("truncated data region reading '" + meta.name + "' from " + path_.string());
    return Tensor(meta.dtype, meta.shape, std::move(payload));
  }

  Checkpoint read_all() {
    Checkpoint ckpt;
    ckpt.metadata = header_.metadata;
    for (const auto& meta : header_.tensors) ckpt.tensors.emplace(meta.name, read(meta));
    return ckpt;
  }

 private:
  fs::path path_;
  std::ifstream in_;
  ContainerHeader header_;
};

struct TensorSpec {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
};

// Streams tensors into a temporary file next to `path`; commit() renames it
// into place. Tensors must be written in canonical (sorted) order. An
// uncommitted writer removes its temporary file.
class CheckpointWriter {
 public:
  CheckpointWriter(fs::path path, std::vector<TensorSpec> specs, std::map<std::string, std::string> metadata)
      : path_(std::move(path)), tmp_path_(path_.string() + ".partial") {
    std::sort(specs.begin(), specs.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    for (std::size_t i = 0; i < specs.size(); ++i) {
      validate_tensor_name(specs[i].name);
      if (i > 0 && specs[i].name == specs[i - 1].name) {
        throw ValidationError("duplicate tensor name '" + specs[i].name + "'");
      }
    }
    if (auto it = metadata.find(std::string(kStepKey)); it != metadata.end() && !parse_step(it->second)) {
      throw ValidationError("metadata step '" + it->second + "' is not a non-negative integer");
    }
    std::uint64_t offset = 0;
    for (auto& spec : specs) {
      TensorMeta meta{spec.name, spec.dtype, spec.shape, offset, 0};
      meta.end = offset + element_count(spec.shape) * dtype_size(spec.dtype);
      offset = meta.end;
      metas_.push_back(std::move(meta));
    }

    const std::string header = encode_header(metas_, metadata);
    out_.open(tmp_path_, std::ios::binary | std::ios::trunc);
    if (!out_) throw Error("cannot create " + tmp_path_.string());
    std::byte prefix[8];
    detail::store_le(prefix, header.size(), 8);
    out_.write(reinterpret_cast<const char*>(prefix), 8);
    out_.write(header.data(), static_cast<std::streamsize>(header.size()));
  }

  CheckpointWriter(const CheckpointWriter&) = delete;
  CheckpointWriter& operator=(const CheckpointWriter&) = delete;

  ~CheckpointWriter() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      fs::remove(tmp_path_, ec);
    }
  }

  const std::vector<TensorMeta>& tensors() const { return metas_; }

  void write(std::string_view name, const Tensor& tensor) {
    if (next_ >= metas_.size() || metas_[next_].name != name) {
      throw ValidationError("tensor '" + std::string(name) + "' written out of canonical order");
    }
    const TensorMeta& meta = metas_[next_];
    if (tensor.dtype() != meta.dtype || tensor.shape() != meta.shape) {
      throw ValidationError("tensor '" + meta.name + "' does not match its declared dtype/shape");
    }
    auto bytes = tensor.bytes();
    out_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out_) throw Error("write failed for " + tmp_path_.string());
    ++next_;
  }

  void commit() {
    if (next_ != metas_.size()) throw ValidationError("commit before all tensors were written");
    out_.flush();
    out_.close();
    if (!out_) throw Error("write failed for " + tmp_path_.string());
    std::error_code ec;
    fs::rename(tmp_path_, path_, ec);
    if (ec) throw Error("cannot rename " + tmp_path_.string() + " to " + path_.string() + ": " + ec.message());
    committed_ = true;
  }

 private:
  fs::path path_;
  fs::path tmp_path_;
  std::vector<TensorMeta> metas_;
  std::ofstream out_;
  std::size_t next_ = 0;
  bool committed_ = false;
};

inline std::vector<TensorSpec> specs_of(const Checkpoint& ckpt) {
  std::vector<TensorSpec> specs;
  for (const auto& [name, t] : ckpt.tensors) specs.push_back({name, t.dtype(), t.shape()});
  return specs;
}

inline std::vector<TensorSpec> specs_of(const ContainerHeader& header) {
  std::vector<TensorSpec> specs;
  for (const auto& m : header.tensors) specs.push_back({m.name, m.dtype, m.shape});
  return specs;
}

inline void write_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  CheckpointWriter writer(path, specs_of(ckpt), ckpt.metadata);
  for (const auto& [name, t] : ckpt.tensors) writer.write(name, t);
  writer.commit();
}

inline ContainerHeader read_header(const fs::path& path) { return CheckpointReader(path).header(); }

inline Tensor read_tensor(const fs::path& path, std::string_view name) { return CheckpointReader(path).read(name); }

inline Checkpoint read_checkpoint(const fs::path& path) { return CheckpointReader(path).read_all(); }

}  // namespace lawa
