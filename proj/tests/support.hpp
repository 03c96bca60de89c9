#pragma once

// Shared test helpers and independent reference implementations. The oracles
// here deliberately avoid the library's code paths: they read raw bytes, use
// their own arithmetic, and never call the averaging or optimizer code.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "lawa/lawa.hpp"

namespace testing_support {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            ("lawa-test-" + tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Builds a container file by hand from a header JSON string and a raw data
// region, bypassing the writer.
inline void write_raw_container(const fs::path& path, const std::string& header, const std::string& data) {
  std::string bytes(8, '\0');
  std::uint64_t len = header.size();
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((len >> (8 * i)) & 0xff);
  spit(path, bytes + header + data);
}

inline lawa::Checkpoint make_checkpoint(std::int64_t step, const std::vector<std::pair<std::string, std::vector<double>>>& tensors,
                                        lawa::DType dtype = lawa::DType::F32) {
  lawa::Checkpoint c;
  for (const auto& [name, values] : tensors) {
    c.add(name, lawa::Tensor::from_values(dtype, {values.size()}, values));
  }
  c.set_step(step);
  return c;
}

// Random checkpoint with a fixed layout derived from `layout_seed` and values
// from `value_rng`.
struct RandomLayout {
  std::vector<std::string> names;
  std::vector<lawa::Shape> shapes;
  std::vector<lawa::DType> dtypes;
};

inline RandomLayout random_layout(std::mt19937_64& rng, std::size_t max_tensors, std::size_t max_elements,
                                  bool mixed_dtypes = true) {
  RandomLayout layout;
  std::uniform_int_distribution<std::size_t> count(1, max_tensors);
  const std::size_t n = count(rng);
  for (std::size_t i = 0; i < n; ++i) {
    layout.names.push_back("layer" + std::to_string(i) + (rng() % 2 ? ".weight" : ".bias"));
    std::uniform_int_distribution<std::size_t> elems(0, max_elements);
    std::size_t total = elems(rng);
    lawa::Shape shape;
    if (total > 0 && rng() % 2) {
      std::size_t rows = 1 + rng() % 8;
      while (total % rows) --rows;
      shape = {rows, total / rows};
    } else {
      shape = {total};
    }
    layout.shapes.push_back(shape);
    layout.dtypes.push_back(mixed_dtypes && rng() % 3 == 0 ? lawa::DType::F64 : lawa::DType::F32);
  }
  return layout;
}

inline lawa::Checkpoint random_checkpoint(std::mt19937_64& rng, const RandomLayout& layout, std::int64_t step) {
  lawa::Checkpoint c;
  std::normal_distribution<double> normal(0.0, 3.0);
  for (std::size_t i = 0; i < layout.names.size(); ++i) {
    std::vector<double> values(lawa::element_count(layout.shapes[i]));
    for (auto& v : values) v = normal(rng);
    c.add(layout.names[i], lawa::Tensor::from_values(layout.dtypes[i], layout.shapes[i], values));
  }
  c.set_step(step);
  return c;
}

// ---- oracles ---------------------------------------------------------------

// Decodes a stored tensor straight from the file bytes.
inline std::vector<double> raw_tensor_values(const fs::path& path, const std::string& name) {
  const std::string bytes = slurp(path);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  const auto header = nlohmann::json::parse(bytes.substr(8, len));
  const auto& entry = header.at(name);
  const bool f64 = entry.at("dtype") == "F64";
  const std::uint64_t begin = entry.at("data_offsets")[0];
  const std::uint64_t end = entry.at("data_offsets")[1];
  const char* data = bytes.data() + 8 + len;
  std::vector<double> out;
  for (std::uint64_t off = begin; off < end; off += f64 ? 8 : 4) {
    if (f64) {
      double d;
      std::memcpy(&d, data + off, 8);
      out.push_back(d);
    } else {
      float f;
      std::memcpy(&f, data + off, 4);
      out.push_back(f);
    }
  }
  return out;
}

// Loads every member completely and averages each element in double, summing
// in ascending step order, then rounds once to the member dtype.
inline lawa::Checkpoint full_load_average(const std::vector<fs::path>& members) {
  std::vector<std::pair<std::int64_t, fs::path>> ordered;
  std::vector<lawa::Checkpoint> loaded;
  for (const auto& p : members) ordered.emplace_back(*lawa::read_checkpoint(p).step(), p);
  std::sort(ordered.begin(), ordered.end());
  for (const auto& [step, p] : ordered) loaded.push_back(lawa::read_checkpoint(p));

  lawa::Checkpoint out;
  for (const auto& [name, first] : loaded.front().tensors) {
    std::vector<double> sum(first.size(), 0.0);
    for (const auto& entry : ordered) {
      const auto values = raw_tensor_values(entry.second, name);
      for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += values[i];
    }
    for (auto& s : sum) s /= static_cast<double>(loaded.size());
    out.add(name, lawa::Tensor::from_values(first.dtype(), first.shape(), sum));
  }
  return out;
}

// Normal-equations solution of y = w x + b in closed form.
struct LeastSquares {
  double w = 0.0;
  double b = 0.0;
};

inline LeastSquares toy_least_squares(const lawa::Dataset& d) {
  long double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const long double n = static_cast<long double>(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    sx += d.x[i];
    sy += d.y[i];
    sxx += static_cast<long double>(d.x[i]) * d.x[i];
    sxy += static_cast<long double>(d.x[i]) * d.y[i];
  }
  const long double w = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return {static_cast<double>(w), static_cast<double>((sy - w * sx) / n)};
}

// Scalar Adam written directly from the update equations.
inline double adam_reference(double theta, const std::vector<double>& grads, double lr, double b1 = 0.9,
                             double b2 = 0.999, double eps = 1e-8) {
  double m = 0.0, v = 0.0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double mhat = m / (1.0 - std::pow(b1, static_cast<double>(t)));
    const double vhat = v / (1.0 - std::pow(b2, static_cast<double>(t)));
    theta -= lr * mhat / (std::sqrt(vhat) + eps);
  }
  return theta;
}

inline std::vector<std::int64_t> steps_range(std::int64_t first, std::int64_t last, std::int64_t spacing) {
  std::vector<std::int64_t> out;
  for (std::int64_t s = first; s <= last; s += spacing) out.push_back(s);
  return out;
}

// Manifest whose entries point at non-existent paths; enough for planning.
inline lawa::TrajectoryManifest spaced_manifest(std::int64_t first, std::int64_t last, std::int64_t spacing) {
  lawa::TrajectoryManifest m;
  m.model = "synthetic";
  for (auto s : steps_range(first, last, spacing)) m.checkpoints.push_back({s, "ckpt-" + std::to_string(s)});
  return m;
}

// Writes one checkpoint per step into dir and returns the manifest.
inline lawa::TrajectoryManifest write_trajectory(const fs::path& dir, const std::vector<lawa::Checkpoint>& ckpts) {
  lawa::TrajectoryManifest m;
  m.model = "synthetic";
  for (const auto& c : ckpts) {
    const fs::path p = dir / ("ckpt-" + std::to_string(*c.step()) + ".safetensors");
    lawa::write_checkpoint(c, p);
    m.checkpoints.push_back({*c.step(), p});
  }
  m.save(dir / "manifest.json");
  return m;
}

}  // namespace testing_support
