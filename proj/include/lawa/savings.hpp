#pragma once

// Steps-to-target and GPU-hour savings from comparing an original and a
// derived metric series. For tolerance eps the target is
// final_original * (1 + eps); savings are measured from the original run's
// last evaluated step back to the derived series' first hit.

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lawa/error.hpp"
#include "lawa/evaluation.hpp"

namespace lawa {

struct HardwareProfile {
  std::string model_name;
  double total_gpu_hours = 0.0;
  std::int64_t total_steps = 0;

  void validate() const {
    if (!(total_gpu_hours > 0.0) || !std::isfinite(total_gpu_hours)) throw ValidationError("total GPU hours must be > 0");
    if (total_steps <= 0) throw ValidationError("total steps must be > 0");
  }

  double hours_for_steps(double steps) const { return steps / static_cast<double>(total_steps) * total_gpu_hours; }

  nlohmann::json to_json() const {
    return {{"model_name", model_name}, {"total_gpu_hours", total_gpu_hours}, {"total_steps", total_steps}};
  }
};

// Full-run GPU hours of the public Pythia suite (A100-40GB).
inline const std::vector<HardwareProfile>& builtin_profiles() {
  static const std::vector<HardwareProfile> profiles{
      {"pythia-1b", 4830.0, 141000},
      {"pythia-2.8b", 14240.0, 141000},
      {"pythia-6.9b", 33500.0, 141000},
      {"pythia-12b", 72300.0, 141000},
  };
  return profiles;
}

inline HardwareProfile find_profile(std::string_view name) {
  for (const auto& p : builtin_profiles()) {
    if (p.model_name == name) return p;
  }
  throw ValidationError("unknown hardware profile '" + std::string(name) + "'");
}

inline const std::vector<double>& default_tolerances() {
  static const std::vector<double> grid{0.0, 0.01, 0.02, 0.05, 0.10};
  return grid;
}

struct TargetHit {
  std::int64_t step = 0;          // first evaluated step at or below target
  double interpolated_step = 0.0;  // linear crossing between that step and the previous one
};

inline std::optional<TargetHit> steps_to_target(const EvalSeries& series, double target) {
  const auto& pts = series.points;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (pts[i].value > target) continue;
    TargetHit hit{pts[i].step, static_cast<double>(pts[i].step)};
    if (i > 0) {
      const auto& prev = pts[i - 1];
      const double frac = (prev.value - target) / (prev.value - pts[i].value);
      hit.interpolated_step = static_cast<double>(prev.step) + frac * static_cast<double>(pts[i].step - prev.step);
    }
    return hit;
  }
  return std::nullopt;
}

// First evaluated step after which the series never exceeds the target again.
inline std::optional<std::int64_t> sustained_hit(const EvalSeries& series, double target) {
  std::optional<std::int64_t> hit;
  for (auto it = series.points.rbegin(); it != series.points.rend() && it->value <= target; ++it) hit = it->step;
  return hit;
}

struct SavingsRow {
  double tolerance = 0.0;
  double target = 0.0;
  std::optional<TargetHit> first_hit;
  std::optional<std::int64_t> sustained;
  std::int64_t steps_saved = 0;
  double steps_saved_interpolated = 0.0;
  double gpu_hours_saved = 0.0;
  double gpu_hours_saved_interpolated = 0.0;
  std::int64_t sustained_steps_saved = 0;
  double sustained_gpu_hours_saved = 0.0;
};

struct SavingsReport {
  HardwareProfile profile;
  std::vector<SavingsRow> rows;
  double final_original = 0.0;
  double final_derived = 0.0;
  std::int64_t last_original_step = 0;

  nlohmann::json to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json row{{"tolerance", r.tolerance},
                         {"target", r.target},
                         {"steps_saved", r.steps_saved},
                         {"steps_saved_interpolated", r.steps_saved_interpolated},
                         {"gpu_hours_saved", r.gpu_hours_saved},
                         {"gpu_hours_saved_interpolated", r.gpu_hours_saved_interpolated},
                         {"sustained_steps_saved", r.sustained_steps_saved},
                         {"sustained_gpu_hours_saved", r.sustained_gpu_hours_saved}};
      row["first_hit_step"] = r.first_hit ? nlohmann::json(r.first_hit->step) : nlohmann::json(nullptr);
      row["first_hit_interpolated_step"] =
          r.first_hit ? nlohmann::json(r.first_hit->interpolated_step) : nlohmann::json(nullptr);
      row["sustained_hit_step"] = r.sustained ? nlohmann::json(*r.sustained) : nlohmann::json(nullptr);
      rows_json.push_back(std::move(row));
    }
    return {{"profile", profile.to_json()},
            {"final_original", final_original},
            {"final_derived", final_derived},
            {"last_original_step", last_original_step},
            {"curve", rows_json}};
  }

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "tolerance,target,steps_saved,gpu_hours_saved\n";
    for (const auto& r : rows) out << r.tolerance << ',' << r.target << ',' << r.steps_saved << ',' << r.gpu_hours_saved << '\n';
    return out.str();
  }
};

inline SavingsReport savings_curve(const EvalSeries& original, const EvalSeries& derived, const HardwareProfile& profile,
                                   const std::vector<double>& tolerances = default_tolerances()) {
  profile.validate();
  if (original.empty() || derived.empty()) throw ValidationError("savings need non-empty series");
  if (!std::isfinite(original.back().value)) throw ValidationError("final original value must be finite");
  for (double eps : tolerances) {
    if (!(eps >= 0.0)) throw ValidationError("tolerances must be non-negative");
  }

  SavingsReport report;
  report.profile = profile;
  report.final_original = original.back().value;
  report.final_derived = derived.back().value;
  report.last_original_step = original.back().step;
  const auto last = report.last_original_step;
  for (double eps : tolerances) {
    SavingsRow row;
    row.tolerance = eps;
    row.target = report.final_original * (1.0 + eps);
    row.first_hit = steps_to_target(derived, row.target);
    row.sustained = sustained_hit(derived, row.target);
    if (row.first_hit) {
      row.steps_saved = last - row.first_hit->step;
      row.steps_saved_interpolated = static_cast<double>(last) - row.first_hit->interpolated_step;
    }
    if (row.sustained) row.sustained_steps_saved = last - *row.sustained;
    row.gpu_hours_saved = profile.hours_for_steps(static_cast<double>(row.steps_saved));
    row.gpu_hours_saved_interpolated = profile.hours_for_steps(row.steps_saved_interpolated);
    row.sustained_gpu_hours_saved = profile.hours_for_steps(static_cast<double>(row.sustained_steps_saved));
    report.rows.push_back(row);
  }
  return report;
}

inline constexpr int kReportSchemaVersion = 1;

struct SpikeComparison {
  SpikeReport original;
  SpikeReport derived;
};

// Comparison document: both series, savings curve, spike comparison and
// plot-ready tables.
inline nlohmann::json build_report(const EvalSeries& original, const EvalSeries& derived, const HardwareProfile& profile,
                                   const std::optional<SpikeComparison>& spikes = std::nullopt,
                                   const std::vector<double>& tolerances = default_tolerances()) {
  if (original.dataset_id != derived.dataset_id) {
    throw ValidationError("dataset_id mismatch: '" + original.dataset_id + "' vs '" + derived.dataset_id + "'");
  }
  original.validate();
  derived.validate();
  const SavingsReport savings = savings_curve(original, derived, profile, tolerances);

  nlohmann::json doc;
  doc["schema"] = "lawa-kit/report";
  doc["schema_version"] = kReportSchemaVersion;
  doc["dataset_id"] = original.dataset_id;
  doc["metric"] = original.metric_name;
  doc["series"] = {{"original", original.to_json()}, {"derived", derived.to_json()}};
  doc["savings"] = savings.to_json();

  if (spikes) {
    doc["spikes"] = {{"original", spikes->original.to_json()},
                     {"derived", spikes->derived.to_json()},
                     {"comparison",
                      {{"original_count", spikes->original.spikes.size()},
                       {"derived_count", spikes->derived.spikes.size()},
                       {"original_max_excess", spikes->original.max_excess()},
                       {"derived_max_excess", spikes->derived.max_excess()}}}};
  } else {
    doc["spikes"] = nullptr;
  }

  nlohmann::json curve_rows = nlohmann::json::array();
  for (const auto& r : savings.rows) curve_rows.push_back({r.tolerance, r.target, r.steps_saved, r.gpu_hours_saved});
  // Union of evaluated steps; null where a series has no point.
  std::map<std::int64_t, std::pair<std::optional<double>, std::optional<double>>> merged;
  for (const auto& p : original.points) merged[p.step].first = p.value;
  for (const auto& p : derived.points) merged[p.step].second = p.value;
  nlohmann::json traj_rows = nlohmann::json::array();
  for (const auto& [step, values] : merged) {
    traj_rows.push_back({step, values.first ? nlohmann::json(*values.first) : nlohmann::json(nullptr),
                         values.second ? nlohmann::json(*values.second) : nlohmann::json(nullptr)});
  }
  doc["tables"] = {
      {"savings_curve", {{"columns", {"tolerance", "target", "steps_saved", "gpu_hours_saved"}}, {"rows", curve_rows}}},
      {"trajectories", {{"columns", {"step", "original", "derived"}}, {"rows", traj_rows}}}};
  return doc;
}

}  // namespace lawa
