#pragma once

// Latest-weight averaging over a saved trajectory: window planning, uniform
// streaming averages, and EMA trajectories.
//
// A window ending at output step t with k members spaced nu apart holds the
// checkpoints {t - (k-1)*nu, ..., t - nu, t}. Averages accumulate in double
// and round once to the storage dtype. Only one tensor (plus its double
// accumulator) is resident at a time, independent of k.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lawa/error.hpp"
#include "lawa/manifest.hpp"
#include "lawa/parallel.hpp"
#include "lawa/tensor_store.hpp"

namespace lawa {

struct AveragingPlan {
  std::int64_t k = 5;
  std::int64_t nu = 1000;        // steps between members of one window
  std::int64_t interval = 3000;  // steps between successive derived checkpoints
  std::int64_t start_step = 21000;

  void validate() const {
    if (k < 1) throw ValidationError("k must be >= 1");
    if (nu < 1) throw ValidationError("nu must be >= 1");
    if (interval < 1) throw ValidationError("interval must be >= 1");
    if (start_step < 0) throw ValidationError("start step must be >= 0");
  }

  // k=5, nu=1000, interval=3000, start=21000 for 1000-step spacing. Otherwise
  // nu is the manifest spacing, interval is three spacings, and the first
  // window is the earliest complete one.
  static AveragingPlan defaults_for(const TrajectoryManifest& manifest) {
    AveragingPlan plan;
    const std::int64_t spacing = manifest.spacing();
    if (spacing == 1000 || spacing == 0) return plan;
    plan.nu = spacing;
    plan.interval = 3 * spacing;
    plan.start_step = manifest.first_step() + (plan.k - 1) * plan.nu;
    return plan;
  }

  nlohmann::json to_json() const {
    return {{"k", k}, {"nu", nu}, {"interval", interval}, {"start_step", start_step}};
  }
};

inline std::vector<std::int64_t> window_member_steps(std::int64_t output_step, const AveragingPlan& plan) {
  std::vector<std::int64_t> steps;
  steps.reserve(static_cast<std::size_t>(plan.k));
  for (std::int64_t i = plan.k - 1; i >= 0; --i) steps.push_back(output_step - i * plan.nu);
  return steps;
}

struct Window {
  std::int64_t output_step = 0;
  std::vector<std::int64_t> member_steps;  // present members, ascending
  std::vector<fs::path> member_paths;
  std::vector<std::int64_t> missing_steps;  // non-empty only in permissive mode
};

struct SkippedWindow {
  std::int64_t output_step = 0;
  std::string reason;
};

enum class MissingPolicy {
  Skip,        // drop windows with any missing member
  Permissive,  // average the available members if there are at least two
};

struct WindowPlan {
  AveragingPlan plan;
  std::vector<Window> windows;
  std::vector<SkippedWindow> skipped;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const {
    nlohmann::json doc;
    doc["plan"] = plan.to_json();
    doc["windows"] = nlohmann::json::array();
    for (const auto& w : windows) {
      doc["windows"].push_back(
          {{"output_step", w.output_step}, {"member_steps", w.member_steps}, {"missing_steps", w.missing_steps}});
    }
    doc["skipped"] = nlohmann::json::array();
    for (const auto& s : skipped) doc["skipped"].push_back({{"output_step", s.output_step}, {"reason", s.reason}});
    doc["warnings"] = warnings;
    return doc;
  }
};

inline WindowPlan plan_windows(const TrajectoryManifest& manifest, const AveragingPlan& plan,
                               MissingPolicy policy = MissingPolicy::Skip) {
  plan.validate();
  manifest.validate();
  if (manifest.empty()) throw ValidationError("manifest has no checkpoints");
  const std::int64_t spacing = manifest.spacing();
  if (spacing > 0 && plan.k > 1 && plan.nu % spacing != 0) {
    throw ValidationError("nu=" + std::to_string(plan.nu) + " is incompatible with checkpoint spacing " +
                          std::to_string(spacing));
  }
  if (plan.start_step > manifest.last_step()) {
    throw ValidationError("start step " + std::to_string(plan.start_step) + " is beyond the last checkpoint " +
                          std::to_string(manifest.last_step()));
  }

  WindowPlan out;
  out.plan = plan;
  if (plan.k == 1) out.warnings.push_back("k=1: derived checkpoints are copies of the originals");

  for (std::int64_t t = plan.start_step; t <= manifest.last_step(); t += plan.interval) {
    const auto steps = window_member_steps(t, plan);
    if (steps.front() < manifest.first_step()) {
      out.skipped.push_back({t, "earliest member step " + std::to_string(steps.front()) +
                                    " precedes first checkpoint " + std::to_string(manifest.first_step())});
      continue;
    }
    Window w;
    w.output_step = t;
    for (auto s : steps) {
      if (const fs::path* p = manifest.find(s)) {
        w.member_steps.push_back(s);
        w.member_paths.push_back(*p);
      } else {
        w.missing_steps.push_back(s);
      }
    }
    if (w.missing_steps.empty()) {
      out.windows.push_back(std::move(w));
      continue;
    }
    std::string missing;
    for (auto s : w.missing_steps) missing += (missing.empty() ? "" : ",") + std::to_string(s);
    if (policy == MissingPolicy::Permissive && w.member_steps.size() >= 2) {
      out.warnings.push_back("window " + std::to_string(t) + " averages " + std::to_string(w.member_steps.size()) +
                             " of " + std::to_string(plan.k) + " members (missing " + missing + ")");
      out.windows.push_back(std::move(w));
    } else {
      out.skipped.push_back({t, "missing member steps " + missing});
    }
  }
  return out;
}

namespace detail {

// Opens the members ordered by (step, path) so the result does not depend on
// the caller's order, and checks that all share the first member's layout.
inline std::vector<CheckpointReader> open_members(std::span<const fs::path> paths) {
  std::vector<CheckpointReader> readers;
  readers.reserve(paths.size());
  for (const auto& p : paths) {
    readers.emplace_back(p);
    if (!readers.back().header().step()) throw FormatError(p.string() + " has no step metadata");
  }
  std::sort(readers.begin(), readers.end(), [](const CheckpointReader& a, const CheckpointReader& b) {
    auto sa = *a.header().step(), sb = *b.header().step();
    return sa != sb ? sa < sb : a.path() < b.path();
  });

  const auto& ref = readers.front().header().tensors;
  for (std::size_t r = 1; r < readers.size(); ++r) {
    const auto& other = readers[r].header().tensors;
    const std::string where = readers[r].path().string();
    for (const auto& m : ref) {
      if (!readers[r].header().find(m.name)) throw ValidationError("tensor '" + m.name + "' missing in " + where);
    }
    if (other.size() != ref.size()) throw ValidationError("tensor-set mismatch: " + where + " has extra tensors");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (other[i].dtype != ref[i].dtype) throw ValidationError("dtype mismatch for '" + ref[i].name + "' in " + where);
      if (other[i].shape != ref[i].shape) throw ValidationError("shape mismatch for '" + ref[i].name + "' in " + where);
    }
  }
  return readers;
}

inline std::map<std::string, std::string> average_metadata(const std::vector<CheckpointReader>& readers) {
  std::string members;
  std::int64_t step = 0;
  for (const auto& r : readers) {
    const auto s = *r.header().step();
    step = std::max(step, s);
    members += (members.empty() ? "" : ",") + std::to_string(s);
  }
  return {{std::string(kStepKey), std::to_string(step)},
          {"lawa_count", std::to_string(readers.size())},
          {"lawa_members", members}};
}

template <class Emit>
void stream_average(std::vector<CheckpointReader>& readers, Emit&& emit) {
  const double count = static_cast<double>(readers.size());
  std::vector<double> acc;
  for (const auto& meta : readers.front().header().tensors) {
    acc.assign(element_count(meta.shape), 0.0);
    for (auto& r : readers) {
      const Tensor t = r.read(meta.name);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += t.at(i);
    }
    for (auto& v : acc) v /= count;
    emit(meta.name, Tensor::from_values(meta.dtype, meta.shape, acc));
  }
}

inline void require_members(std::span<const fs::path> paths) {
  if (paths.size() < 2) throw ValidationError("averaging needs at least 2 members, got " + std::to_string(paths.size()));
}

}  // namespace detail

// Uniform mean of the member checkpoints, materialized in memory.
inline Checkpoint average_checkpoints(std::span<const fs::path> members) {
  detail::require_members(members);
  auto readers = detail::open_members(members);
  Checkpoint out;
  out.metadata = detail::average_metadata(readers);
  detail::stream_average(readers, [&](const std::string& name, Tensor t) { out.tensors.emplace(name, std::move(t)); });
  return out;
}

// Same mean, streamed straight to `out_path`; peak memory is one tensor.
inline void average_checkpoints_to_file(std::span<const fs::path> members, const fs::path& out_path) {
  detail::require_members(members);
  auto readers = detail::open_members(members);
  CheckpointWriter writer(out_path, specs_of(readers.front().header()), detail::average_metadata(readers));
  detail::stream_average(readers, [&](const std::string& name, const Tensor& t) { writer.write(name, t); });
  writer.commit();
}

// Rewrites a single checkpoint with averaging provenance (k=1 windows).
inline void copy_as_average(const fs::path& member, const fs::path& out_path) {
  std::vector<CheckpointReader> one;
  one.emplace_back(member);
  if (!one.front().header().step()) throw FormatError(member.string() + " has no step metadata");
  CheckpointWriter writer(out_path, specs_of(one.front().header()), detail::average_metadata(one));
  for (const auto& m : one.front().header().tensors) writer.write(m.name, one.front().read(m));
  writer.commit();
}

inline std::string derived_filename(std::string_view prefix, std::int64_t step) {
  return std::string(prefix) + "-step-" + std::to_string(step) + ".safetensors";
}

inline void ensure_output_dir(const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw Error("output directory " + out_dir.string() + " is not writable");
  const fs::path probe = out_dir / ".lawa-write-probe";
  {
    std::ofstream out(probe);
    if (!out) throw Error("output directory " + out_dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
}

struct DeriveOptions {
  MissingPolicy policy = MissingPolicy::Skip;
  unsigned threads = 1;
};

struct DeriveResult {
  TrajectoryManifest manifest;
  WindowPlan plan;
};

// Writes one averaged checkpoint per window plus `manifest.json` and
// `plan.json` into out_dir. Windows are processed in parallel.
inline DeriveResult derive_trajectory(const TrajectoryManifest& manifest, const AveragingPlan& plan,
                                      const fs::path& out_dir, const DeriveOptions& options = {}) {
  DeriveResult result;
  result.plan = plan_windows(manifest, plan, options.policy);
  if (result.plan.windows.empty()) throw ValidationError("averaging plan produced no complete windows");
  ensure_output_dir(out_dir);

  const auto& windows = result.plan.windows;
  std::vector<fs::path> outputs(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) outputs[i] = out_dir / derived_filename("lawa", windows[i].output_step);

  parallel_for(windows.size(), options.threads, [&](std::size_t i) {
    const auto& w = windows[i];
    if (w.member_paths.size() == 1) {
      copy_as_average(w.member_paths.front(), outputs[i]);
    } else {
      average_checkpoints_to_file(w.member_paths, outputs[i]);
    }
  });

  result.manifest.model = manifest.model + (manifest.model.empty() ? "" : "+") + "lawa(k=" + std::to_string(plan.k) +
                          ",nu=" + std::to_string(plan.nu) + ")";
  for (std::size_t i = 0; i < windows.size(); ++i) result.manifest.checkpoints.push_back({windows[i].output_step, outputs[i]});
  result.manifest.save(out_dir / "manifest.json");
  {
    std::ofstream out(out_dir / "plan.json", std::ios::trunc);
    out << result.plan.to_json().dump(2) << '\n';
  }
  return result;
}

struct EmaConfig {
  double decay = 0.9999;

  void validate() const {
    if (!(decay >= 0.0 && decay < 1.0)) throw ValidationError("EMA decay must lie in [0, 1)");
  }
};

// ema_0 = theta_first; ema_t = decay * ema_{t-1} + (1 - decay) * theta_t, in
// manifest order, with a double accumulator carried across steps. Writes one
// checkpoint per input step plus `manifest.json`.
inline TrajectoryManifest ema_trajectory(const TrajectoryManifest& manifest, const EmaConfig& config,
                                         const fs::path& out_dir) {
  config.validate();
  manifest.validate();
  if (manifest.empty()) throw ValidationError("manifest has no checkpoints");
  ensure_output_dir(out_dir);

  TrajectoryManifest out;
  out.model = manifest.model + (manifest.model.empty() ? "" : "+") + "ema(" + format_double(config.decay) + ")";

  std::vector<TensorMeta> layout;
  std::map<std::string, std::vector<double>> acc;
  for (std::size_t idx = 0; idx < manifest.size(); ++idx) {
    const auto& entry = manifest.checkpoints[idx];
    CheckpointReader reader(entry.path);
    const auto& tensors = reader.header().tensors;
    if (idx == 0) {
      layout = tensors;
    } else {
      bool same = tensors.size() == layout.size();
      for (std::size_t i = 0; same && i < layout.size(); ++i) {
        same = tensors[i].name == layout[i].name && tensors[i].dtype == layout[i].dtype && tensors[i].shape == layout[i].shape;
      }
      if (!same) throw ValidationError("tensor-set mismatch across trajectory at " + entry.path.string());
    }

    const fs::path out_path = out_dir / derived_filename("ema", entry.step);
    CheckpointWriter writer(out_path, specs_of(reader.header()),
                            {{std::string(kStepKey), std::to_string(entry.step)},
                             {"ema_decay", format_double(config.decay)}});
    for (const auto& meta : layout) {
      const Tensor t = reader.read(meta);
      auto& a = acc[meta.name];
      if (idx == 0) {
        a = t.to_f64();
      } else {
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = config.decay * a[i] + (1.0 - config.decay) * t.at(i);
      }
      writer.write(meta.name, Tensor::from_values(meta.dtype, meta.shape, a));
    }
    writer.commit();
    out.checkpoints.push_back({entry.step, out_path});
  }
  out.save(out_dir / "manifest.json");
  return out;
}

}  // namespace lawa
