#pragma once

// Linear mode connectivity: convex interpolation between two checkpoints and
// the error barrier along the alpha path. alpha = 1 is endpoint a, alpha = 0
// is endpoint b. Metrics are lower-is-better.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lawa/error.hpp"
#include "lawa/parallel.hpp"
#include "lawa/tensor.hpp"

namespace lawa {

// alpha * a + (1 - alpha) * b per element, accumulated in double and rounded
// once. alpha = 1 and alpha = 0 return a and b unchanged.
inline Checkpoint interpolate(const Checkpoint& a, const Checkpoint& b, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1], got " + format_double(alpha));
  require_same_layout(a, b);
  const double beta = 1.0 - alpha;
  Checkpoint out;
  for (auto ia = a.tensors.begin(), ib = b.tensors.begin(); ia != a.tensors.end(); ++ia, ++ib) {
    const Tensor& ta = ia->second;
    const Tensor& tb = ib->second;
    if (alpha == 1.0 || alpha == 0.0) {
      out.tensors.emplace(ia->first, alpha == 1.0 ? ta : tb);
      continue;
    }
    std::vector<double> mixed(ta.size());
    for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] = alpha * ta.at(i) + beta * tb.at(i);
    out.tensors.emplace(ia->first, Tensor::from_values(ta.dtype(), ta.shape(), mixed));
  }
  out.metadata["lmc_alpha"] = format_double(alpha);
  if (auto s = a.step()) out.metadata["lmc_a_step"] = std::to_string(*s);
  if (auto s = b.step()) out.metadata["lmc_b_step"] = std::to_string(*s);
  return out;
}

inline const std::vector<double>& default_alpha_grid() {
  static const std::vector<double> grid{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  return grid;
}

inline void validate_alphas(const std::vector<double>& alphas) {
  if (alphas.size() < 2) throw ValidationError("alpha grid needs at least the endpoints 0 and 1");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (!(alphas[i] >= 0.0 && alphas[i] <= 1.0)) throw ValidationError("alpha outside [0, 1]");
    if (i > 0 && !(alphas[i] > alphas[i - 1])) throw ValidationError("alphas must be strictly increasing");
  }
  if (alphas.front() != 0.0 || alphas.back() != 1.0) throw ValidationError("alpha grid must contain 0 and 1");
}

using CheckpointMetric = std::function<double(const Checkpoint&)>;

struct LmcSweep {
  std::vector<double> alphas;
  std::optional<std::int64_t> endpoint_a_step;
  std::optional<std::int64_t> endpoint_b_step;
  std::vector<std::pair<double, double>> metrics;  // (alpha, value)

  bool evaluated() const { return !alphas.empty() && metrics.size() == alphas.size(); }

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "alpha,metric\n";
    for (const auto& [alpha, value] : metrics) out << alpha << ',' << value << '\n';
    return out.str();
  }
};

// Evaluates the metric at every alpha; alpha points run in parallel and the
// result is assembled in alpha order.
inline LmcSweep sweep(const Checkpoint& a, const Checkpoint& b, const std::vector<double>& alphas,
                      const CheckpointMetric& metric, unsigned threads = 1) {
  validate_alphas(alphas);
  require_same_layout(a, b);
  LmcSweep s;
  s.alphas = alphas;
  s.endpoint_a_step = a.step();
  s.endpoint_b_step = b.step();
  std::vector<double> values(alphas.size());
  parallel_for(alphas.size(), threads, [&](std::size_t i) { values[i] = metric(interpolate(a, b, alphas[i])); });
  for (std::size_t i = 0; i < alphas.size(); ++i) s.metrics.emplace_back(alphas[i], values[i]);
  return s;
}

// max over the grid of metric(alpha) - chord(alpha), where the chord joins the
// endpoint metrics. Always >= 0 because the endpoints are on the grid.
inline double barrier_height(const LmcSweep& s) {
  if (!s.evaluated()) throw ValidationError("sweep has not been evaluated");
  const double at0 = s.metrics.front().second;
  const double at1 = s.metrics.back().second;
  double height = -std::numeric_limits<double>::infinity();
  for (const auto& [alpha, value] : s.metrics) height = std::max(height, value - (alpha * at1 + (1.0 - alpha) * at0));
  return height;
}

inline constexpr double kDefaultBarrierTolerance = 0.05;

struct Connectivity {
  double barrier = 0.0;
  double tau = 0.0;
  bool connected = false;
};

// tau = tolerance * chord midpoint value.
inline Connectivity assess_connectivity(const LmcSweep& s, double tolerance = kDefaultBarrierTolerance) {
  Connectivity c;
  c.barrier = barrier_height(s);
  c.tau = tolerance * 0.5 * (s.metrics.front().second + s.metrics.back().second);
  c.connected = c.barrier <= c.tau;
  return c;
}

inline nlohmann::json to_json(const LmcSweep& s, const Connectivity& c) {
  nlohmann::json points = nlohmann::json::array();
  for (const auto& [alpha, value] : s.metrics) points.push_back({{"alpha", alpha}, {"metric", value}});
  nlohmann::json doc{{"points", points}, {"barrier_height", c.barrier}, {"tau", c.tau}, {"connected", c.connected}};
  doc["endpoint_a_step"] = s.endpoint_a_step ? nlohmann::json(*s.endpoint_a_step) : nlohmann::json(nullptr);
  doc["endpoint_b_step"] = s.endpoint_b_step ? nlohmann::json(*s.endpoint_b_step) : nlohmann::json(nullptr);
  return doc;
}

}  // namespace lawa
