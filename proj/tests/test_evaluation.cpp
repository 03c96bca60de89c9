#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace lawa;
using testing_support::TempDir;

namespace {

EvalSeries series_of(std::vector<double> values, std::int64_t spacing = 10) {
  EvalSeries s;
  for (std::size_t i = 0; i < values.size(); ++i) s.points.push_back({spacing * static_cast<std::int64_t>(i + 1), values[i]});
  return s;
}

Checkpoint toy_checkpoint(double w, double b, std::int64_t step = 0) {
  return testing_support::make_checkpoint(step, {{"b", {b}}, {"w", {w}}});
}

}  // namespace

TEST(EvalCheckpoint, NoiseFreeTruthHasZeroLoss) {
  ToyConfig c;
  c.noise_std = 0.0;
  c.true_w = 2.0;
  c.true_b = -1.0;
  const Dataset d = generate_toy_data(c, 500, streams::kHeldoutData);
  EXPECT_EQ(eval_checkpoint(toy_checkpoint(2.0, -1.0), d, ModelFamily::ToyLinear), 0.0);
}

TEST(EvalCheckpoint, ToyMatchesRecomputation) {
  const Dataset d = generate_toy_data(ToyConfig{}, 1000, streams::kHeldoutData);
  const Checkpoint c = toy_checkpoint(1.37, 0.42);
  const double w = static_cast<float>(1.37), b = static_cast<float>(0.42);
  long double sum = 0;
  for (std::size_t i = 0; i < d.size(); ++i) sum += std::pow(static_cast<long double>(w * d.x[i] + b - d.y[i]), 2);
  const double oracle = static_cast<double>(sum / d.size());
  const double got = eval_checkpoint(c, d, ModelFamily::ToyLinear);
  EXPECT_NEAR(got, oracle, 1e-12 * oracle);
  EXPECT_EQ(got, eval_checkpoint(c, d, ModelFamily::ToyLinear));
}

TEST(EvalCheckpoint, MlpMatchesRecomputation) {
  const MlpShape shape{32, 128, 128, 10};
  const Mlp model(shape);
  Rng rng = Rng::stream(3, 77);
  const std::vector<float> params = model.init(rng);
  const Checkpoint ckpt = pack_checkpoint(model.layout(), params, 0);
  ClassifierConfig cfg;
  cfg.heldout_samples = 300;
  const Dataset d = generate_blobs(cfg, 300, streams::kHeldoutData);

  // Independent forward pass over the named tensors.
  auto dense = [&](const std::string& layer, const std::vector<long double>& in, bool relu) {
    const Tensor& w = ckpt.tensor(layer + ".weight");
    const Tensor& b = ckpt.tensor(layer + ".bias");
    const std::size_t n_out = w.shape()[0], n_in = w.shape()[1];
    std::vector<long double> out(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      long double acc = b.at(o);
      for (std::size_t i = 0; i < n_in; ++i) acc += static_cast<long double>(w.at(o * n_in + i)) * in[i];
      out[o] = relu && acc < 0 ? 0 : acc;
    }
    return out;
  };
  long double total = 0;
  for (std::size_t r = 0; r < d.size(); ++r) {
    std::vector<long double> x(d.row(r), d.row(r) + d.dim);
    const auto logits = dense("fc3", dense("fc2", dense("fc1", x, true), true), false);
    long double mx = *std::max_element(logits.begin(), logits.end()), z = 0;
    for (auto l : logits) z += std::exp(l - mx);
    total += std::log(z) + mx - logits[static_cast<std::size_t>(d.y[r])];
  }
  const double oracle = static_cast<double>(total / d.size());
  EXPECT_NEAR(eval_checkpoint(ckpt, d, ModelFamily::MlpClassifier), oracle, 1e-12 * oracle);
}

TEST(EvalCheckpoint, Errors) {
  const Dataset empty{"e", 1, {}, {}};
  EXPECT_THROW(eval_checkpoint(toy_checkpoint(1, 1), empty, ModelFamily::ToyLinear), ValidationError);
  const Dataset d = generate_toy_data(ToyConfig{}, 10, streams::kHeldoutData);
  EXPECT_THROW(eval_checkpoint(testing_support::make_checkpoint(0, {{"w", {1.0}}}), d, ModelFamily::ToyLinear),
               ValidationError);
}

TEST(Perplexity, Values) {
  EXPECT_EQ(perplexity(0.0), 1.0);
  EXPECT_NEAR(perplexity(std::log(10.0)), 10.0, 1e-9);
  EXPECT_NEAR(perplexity(std::log(16.5)), 16.5, 1e-9);
  EXPECT_EQ(perplexity(1e6), std::numeric_limits<double>::infinity());
  EXPECT_THROW(perplexity(std::nan("")), ValidationError);
  EXPECT_LT(perplexity(2.0), perplexity(2.0 + 1e-9));
}

TEST(EvalTrajectory, PointwiseComposition) {
  TempDir dir("eval");
  ToyConfig c;
  c.epochs = 2;
  const auto run = train_toy(c, dir / "run");
  const Dataset held = load_dataset(run.heldout_path);
  const auto series = eval_trajectory(run.manifest, held, ModelFamily::ToyLinear);
  const auto parallel = eval_trajectory(run.manifest, held, ModelFamily::ToyLinear, 4);
  ASSERT_EQ(series.size(), run.manifest.size());
  EXPECT_EQ(series.points, parallel.points);
  EXPECT_EQ(series.dataset_id, held.id);
  for (std::size_t i = 0; i < series.size(); ++i) {
    EXPECT_EQ(series.points[i].step, run.manifest.checkpoints[i].step);
    EXPECT_EQ(series.points[i].value,
              eval_checkpoint(read_checkpoint(run.manifest.checkpoints[i].path), held, ModelFamily::ToyLinear));
  }

  TrajectoryManifest single;
  single.checkpoints = {run.manifest.checkpoints.front()};
  EXPECT_EQ(eval_trajectory(single, held, ModelFamily::ToyLinear).size(), 1u);
}

TEST(SeriesCsv, RoundTripAndErrors) {
  EvalSeries s = series_of({1.5, 0.1 + 0.2, 1e-300});
  std::istringstream in(s.to_csv());
  EXPECT_EQ(EvalSeries::from_csv(in).points, s.points);

  std::istringstream bad_header("x,y\n1,2\n");
  EXPECT_THROW(EvalSeries::from_csv(bad_header), FormatError);
  std::istringstream bad_row("step,value\n1,abc\n");
  EXPECT_THROW(EvalSeries::from_csv(bad_row), FormatError);
  std::istringstream unordered("step,value\n2,1\n1,1\n");
  EXPECT_THROW(EvalSeries::from_csv(unordered), ValidationError);
  std::istringstream nonfinite("step,value\n1,inf\n");
  EXPECT_THROW(EvalSeries::from_csv(nonfinite), ValidationError);
}

TEST(Spikes, MonotoneSeriesHasNone) {
  EXPECT_TRUE(detect_spikes(series_of({10, 9, 8, 7, 6, 5, 4, 3})).spikes.empty());
}

TEST(Spikes, SingleSpikeExample) {
  const auto report = detect_spikes(series_of({10, 10, 30, 10, 10}), 5, 0.5);
  ASSERT_EQ(report.spikes.size(), 1u);
  EXPECT_EQ(report.spikes[0].step, 30);
  EXPECT_EQ(report.spikes[0].observed, 30.0);
  EXPECT_EQ(report.spikes[0].baseline, 10.0);
  EXPECT_DOUBLE_EQ(report.spikes[0].excess_ratio, 2.0);
  EXPECT_EQ(report.sampling_interval, 10);
}

TEST(Spikes, EdgeWindowsAreTruncated) {
  const auto med = rolling_median(series_of({1, 5, 2, 8, 3}), 5);
  EXPECT_EQ(med, (std::vector<double>{1, 2, 3, 3, 3}));
}

TEST(Spikes, EveryListedSpikeExceedsThreshold) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(1.0, 2.0);
  std::vector<double> values(200);
  for (auto& v : values) v = u(rng);
  const auto report = detect_spikes(series_of(values), 7, 0.2);
  EXPECT_FALSE(report.spikes.empty());
  for (const auto& s : report.spikes) EXPECT_GT(s.excess_ratio, 0.2);
}

TEST(Spikes, Errors) {
  EXPECT_THROW(detect_spikes(series_of({1, 2})), ValidationError);
  EXPECT_THROW(detect_spikes(series_of({1, 2, 3}), 4, 0.1), ValidationError);
  EXPECT_THROW(detect_spikes(series_of({1, 2, 3}), 1, 0.1), ValidationError);
  EXPECT_THROW(detect_spikes(series_of({1, 2, 3}), 3, 0.0), ValidationError);
}

TEST(Spikes, InjectedPerturbationIsDampedByAveraging) {
  TempDir dir("eval");
  const auto run = train_toy(ToyConfig{}, dir / "run");
  const Dataset held = load_dataset(run.heldout_path);
  const std::int64_t spike_step = 6000;
  const auto clean_raw = eval_trajectory(run.manifest, held, ModelFamily::ToyLinear);
  const AveragingPlan plan{5, 100, 100, 500};
  const auto clean_lawa = eval_trajectory(derive_trajectory(run.manifest, plan, dir / "clean").manifest, held,
                                          ModelFamily::ToyLinear);

  Checkpoint c = read_checkpoint(*run.manifest.find(spike_step));
  c.tensors["w"].set(0, c.tensor("w").at(0) + 0.5);
  write_checkpoint(c, *run.manifest.find(spike_step));
  const auto spiked_raw = eval_trajectory(run.manifest, held, ModelFamily::ToyLinear);
  const auto spiked_lawa = eval_trajectory(derive_trajectory(run.manifest, plan, dir / "spiked").manifest, held,
                                           ModelFamily::ToyLinear);

  auto max_excess = [](const EvalSeries& clean, const EvalSeries& spiked) {
    double m = 0;
    for (std::size_t i = 0; i < clean.size(); ++i) m = std::max(m, spiked.points[i].value - clean.points[i].value);
    return m;
  };
  const double raw_excess = max_excess(clean_raw, spiked_raw);
  const double lawa_excess = max_excess(clean_lawa, spiked_lawa);
  EXPECT_GT(raw_excess, 0.1);
  EXPECT_LE(lawa_excess, raw_excess / 5 * 1.10);

  const auto raw_spikes = detect_spikes(spiked_raw);
  ASSERT_FALSE(raw_spikes.spikes.empty());
  const auto largest = std::max_element(raw_spikes.spikes.begin(), raw_spikes.spikes.end(),
                                        [](const auto& a, const auto& b) { return a.excess_ratio < b.excess_ratio; });
  EXPECT_EQ(largest->step, spike_step);
}
