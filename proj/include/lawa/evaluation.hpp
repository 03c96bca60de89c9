#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lawa/error.hpp"
#include "lawa/manifest.hpp"
#include "lawa/models.hpp"
#include "lawa/parallel.hpp"
#include "lawa/tensor_store.hpp"

namespace lawa {

struct SeriesPoint {
  std::int64_t step = 0;
  double value = 0.0;
  bool operator==(const SeriesPoint&) const = default;
};

// Metric trajectory: strictly increasing steps, finite values.
struct EvalSeries {
  std::vector<SeriesPoint> points;
  std::string metric_name = "loss";
  std::string dataset_id;

  bool empty() const { return points.empty(); }
  std::size_t size() const { return points.size(); }
  const SeriesPoint& back() const { return points.back(); }

  void validate() const {
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (!std::isfinite(points[i].value)) {
        throw ValidationError("series value at step " + std::to_string(points[i].step) + " is not finite");
      }
      if (i > 0 && points[i].step <= points[i - 1].step) throw ValidationError("series steps must be strictly increasing");
    }
  }

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "step,value\n";
    for (const auto& p : points) out << p.step << ',' << p.value << '\n';
    return out.str();
  }

  static EvalSeries from_csv(std::istream& in, std::string metric_name = "loss", std::string dataset_id = {}) {
    EvalSeries s;
    s.metric_name = std::move(metric_name);
    s.dataset_id = std::move(dataset_id);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("series CSV is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "step,value") throw FormatError("series CSV must start with header 'step,value'");
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto comma = line.find(',');
      if (comma == std::string::npos) throw FormatError("bad series row '" + line + "'");
      try {
        std::size_t used = 0;
        SeriesPoint p;
        p.step = std::stoll(line.substr(0, comma), &used);
        if (used != comma) throw FormatError("bad step in row '" + line + "'");
        const std::string value = line.substr(comma + 1);
        p.value = std::stod(value, &used);
        if (used != value.size()) throw FormatError("bad value in row '" + line + "'");
        s.points.push_back(p);
      } catch (const std::logic_error&) {
        throw FormatError("bad series row '" + line + "'");
      }
    }
    s.validate();
    return s;
  }

  static EvalSeries load_csv(const fs::path& path, std::string metric_name = "loss", std::string dataset_id = {}) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open series " + path.string());
    return from_csv(in, std::move(metric_name), std::move(dataset_id));
  }

  void save_csv(const fs::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << to_csv();
  }

  nlohmann::json to_json() const {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : points) pts.push_back({p.step, p.value});
    return {{"metric", metric_name}, {"dataset_id", dataset_id}, {"points", pts}};
  }
};

// Deterministic mean loss: MSE for toy-linear, cross-entropy for the MLP.
inline double eval_checkpoint(const Checkpoint& ckpt, const Dataset& data, ModelFamily family) {
  if (data.size() == 0) throw ValidationError("empty dataset");
  if (family == ModelFamily::ToyLinear) {
    return ToyLinear::mean_loss(unpack_checkpoint<double>(ToyLinear::layout(), ckpt), data);
  }
  Mlp model(mlp_shape_of(ckpt));
  return model.mean_loss(unpack_checkpoint<double>(model.layout(), ckpt), data);
}

// Checkpoint -> metric closure over a fixed dataset (used for LMC sweeps).
inline auto loss_metric(const Dataset& data, ModelFamily family) {
  return [&data, family](const Checkpoint& c) { return eval_checkpoint(c, data, family); };
}

// exp(mean_nll); overflow yields +inf.
inline double perplexity(double mean_nll) {
  if (!std::isfinite(mean_nll)) throw ValidationError("mean NLL must be finite");
  return std::exp(mean_nll);
}

// One point per manifest step. Checkpoints are evaluated in parallel.
inline EvalSeries eval_trajectory(const TrajectoryManifest& manifest, const Dataset& data, ModelFamily family,
                                  unsigned threads = 1) {
  EvalSeries series;
  series.dataset_id = data.id;
  series.metric_name = family == ModelFamily::ToyLinear ? "mse" : "cross_entropy";
  series.points.resize(manifest.size());
  parallel_for(manifest.size(), threads, [&](std::size_t i) {
    const auto& e = manifest.checkpoints[i];
    series.points[i] = {e.step, eval_checkpoint(read_checkpoint(e.path), data, family)};
  });
  return series;
}

struct Spike {
  std::int64_t step = 0;
  double observed = 0.0;
  double baseline = 0.0;
  double excess_ratio = 0.0;  // (observed - baseline) / |baseline|
};

struct SpikeReport {
  std::vector<Spike> spikes;
  std::size_t window = 5;
  double threshold = 0.05;
  std::int64_t sampling_interval = 0;  // smallest step gap in the series

  double max_excess() const {
    double m = 0.0;
    for (const auto& s : spikes) m = std::max(m, s.excess_ratio);
    return m;
  }

  nlohmann::json to_json() const {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& s : spikes) {
      list.push_back({{"step", s.step}, {"observed", s.observed}, {"baseline", s.baseline}, {"excess_ratio", s.excess_ratio}});
    }
    return {{"window", window}, {"threshold", threshold}, {"sampling_interval", sampling_interval}, {"spikes", list}};
  }
};

inline constexpr std::size_t kDefaultSpikeWindow = 5;
inline constexpr double kDefaultSpikeThreshold = 0.05;

// Median over a centered window for each point. Near the edges the window
// shrinks symmetrically, so the first and last points are their own median.
inline std::vector<double> rolling_median(const EvalSeries& series, std::size_t window) {
  const std::size_t n = series.size();
  const std::size_t half = window / 2;
  std::vector<double> medians(n), buf;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t reach = std::min({half, i, n - 1 - i});
    const std::size_t lo = i - reach;
    const std::size_t hi = i + reach + 1;
    buf.clear();
    for (std::size_t j = lo; j < hi; ++j) buf.push_back(series.points[j].value);
    std::sort(buf.begin(), buf.end());
    const std::size_t m = buf.size();
    medians[i] = m % 2 ? buf[m / 2] : 0.5 * (buf[m / 2 - 1] + buf[m / 2]);
  }
  return medians;
}

// Flags points whose value exceeds the rolling median by more than
// `threshold` as a fraction of the median.
inline SpikeReport detect_spikes(const EvalSeries& series, std::size_t window = kDefaultSpikeWindow,
                                 double threshold = kDefaultSpikeThreshold) {
  if (window < 3 || window % 2 == 0) throw ValidationError("spike window must be odd and >= 3");
  if (!(threshold > 0.0)) throw ValidationError("spike threshold must be > 0");
  if (series.size() < 3) throw ValidationError("spike detection needs at least 3 points");
  series.validate();

  SpikeReport report;
  report.window = window;
  report.threshold = threshold;
  report.sampling_interval = std::numeric_limits<std::int64_t>::max();
  for (std::size_t i = 1; i < series.size(); ++i) {
    report.sampling_interval = std::min(report.sampling_interval, series.points[i].step - series.points[i - 1].step);
  }
  const auto medians = rolling_median(series, window);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double observed = series.points[i].value;
    const double baseline = medians[i];
    const double excess = observed - baseline;
    double ratio;
    if (baseline != 0.0) {
      ratio = excess / std::abs(baseline);
    } else {
      ratio = excess > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    }
    if (ratio > threshold) report.spikes.push_back({series.points[i].step, observed, baseline, ratio});
  }
  return report;
}

}  // namespace lawa
