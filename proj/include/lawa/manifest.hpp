#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lawa/error.hpp"
#include "lawa/tensor_store.hpp"

namespace lawa {

struct ManifestEntry {
  std::int64_t step = 0;
  fs::path path;

  bool operator==(const ManifestEntry&) const = default;
};

// Ordered (step, checkpoint path) list for one training run.
// File form: {"model": str, "checkpoints": [{"step": int, "path": str}, ...]}.
// Relative paths are resolved against the manifest's directory on load.
struct TrajectoryManifest {
  std::string model;
  std::vector<ManifestEntry> checkpoints;

  bool empty() const { return checkpoints.empty(); }
  std::size_t size() const { return checkpoints.size(); }
  std::int64_t first_step() const { return checkpoints.front().step; }
  std::int64_t last_step() const { return checkpoints.back().step; }

  void validate() const {
    for (std::size_t i = 0; i < checkpoints.size(); ++i) {
      if (checkpoints[i].step < 0) throw ValidationError("manifest step must be non-negative");
      if (i > 0 && checkpoints[i].step <= checkpoints[i - 1].step) {
        throw ValidationError("manifest steps must be strictly increasing (step " +
                              std::to_string(checkpoints[i].step) + ")");
      }
    }
  }

  const fs::path* find(std::int64_t step) const {
    auto it = std::lower_bound(checkpoints.begin(), checkpoints.end(), step,
                               [](const ManifestEntry& e, std::int64_t s) { return e.step < s; });
    return it != checkpoints.end() && it->step == step ? &it->path : nullptr;
  }

  // gcd of consecutive step differences; 0 for fewer than two checkpoints.
  std::int64_t spacing() const {
    std::int64_t g = 0;
    for (std::size_t i = 1; i < checkpoints.size(); ++i) g = std::gcd(g, checkpoints[i].step - checkpoints[i - 1].step);
    return g;
  }

  // Opens every checkpoint and checks its embedded step.
  void verify_files() const {
    for (const auto& e : checkpoints) {
      auto header = read_header(e.path);
      auto step = header.step();
      if (!step) throw FormatError(e.path.string() + " has no step metadata");
      if (*step != e.step) {
        throw FormatError(e.path.string() + " holds step " + std::to_string(*step) + " but manifest says " +
                          std::to_string(e.step));
      }
    }
  }

  nlohmann::json to_json(const fs::path& relative_to = {}) const {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& e : checkpoints) {
      fs::path p = e.path;
      if (!relative_to.empty() && p.is_absolute() == relative_to.is_absolute()) {
        auto rel = p.lexically_relative(relative_to);
        if (!rel.empty() && *rel.begin() != "..") p = rel;
      }
      list.push_back({{"step", e.step}, {"path", p.generic_string()}});
    }
    return {{"model", model}, {"checkpoints", std::move(list)}};
  }

  static TrajectoryManifest from_json(const nlohmann::json& doc, const fs::path& base_dir = {}) {
    if (!doc.is_object()) throw FormatError("manifest must be a JSON object");
    TrajectoryManifest m;
    if (auto it = doc.find("model"); it != doc.end()) {
      if (!it->is_string()) throw FormatError("manifest 'model' must be a string");
      m.model = it->get<std::string>();
    }
    auto list = doc.find("checkpoints");
    if (list == doc.end() || !list->is_array()) throw FormatError("manifest needs a 'checkpoints' array");
    for (const auto& item : *list) {
      if (!item.is_object() || !item.contains("step") || !item.contains("path") || !item["step"].is_number_integer() ||
          !item["path"].is_string()) {
        throw FormatError("manifest entries need integer 'step' and string 'path'");
      }
      fs::path p = item["path"].get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      m.checkpoints.push_back({item["step"].get<std::int64_t>(), p});
    }
    m.validate();
    return m;
  }

  static TrajectoryManifest load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open manifest " + path.string());
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("invalid manifest JSON in " + path.string() + ": " + e.what());
    }
    return from_json(doc, path.parent_path());
  }

  // Paths under the manifest's directory are stored relative to it.
  void save(const fs::path& path) const {
    validate();
    const fs::path tmp = path.string() + ".partial";
    {
      std::ofstream out(tmp, std::ios::trunc);
      if (!out) throw Error("cannot write manifest " + path.string());
      out << to_json(path.parent_path()).dump(2) << '\n';
      if (!out) throw Error("cannot write manifest " + path.string());
    }
    fs::rename(tmp, path);
  }
};

}  // namespace lawa
