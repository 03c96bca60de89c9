#pragma once

// lawa-kit command line. Exit codes: 0 success, 1 validation error (nothing
// written), 2 runtime error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lawa/lawa.hpp"

namespace lawa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

struct Context {
  std::ostream& out;
  std::ostream& err;
  bool json = false;
  bool verbose = false;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void log(const std::string& msg) const {
    if (verbose) err << "[lawa-kit] " << msg << '\n';
  }
};

inline std::vector<double> parse_number_list(const std::string& text, const char* what) {
  std::vector<double> values;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ValidationError(std::string("cannot parse ") + what + " value '" + item + "'");
    }
  }
  if (values.empty()) throw ValidationError(std::string(what) + " list is empty");
  return values;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

inline void require_file(const fs::path& path, const char* flag) {
  if (!fs::is_regular_file(path)) throw ValidationError(std::string(flag) + ": no such file " + path.string());
}

// ---- avg -------------------------------------------------------------------

struct AvgOptions {
  fs::path manifest;
  fs::path out_dir;
  std::optional<std::int64_t> k, nu, interval, start_step;
  bool permissive = false;
};

inline int run_avg(const AvgOptions& o, const Context& ctx) {
  for (auto [value, name] : {std::pair{o.k, "--k"}, {o.nu, "--nu"}, {o.interval, "--interval"}}) {
    if (value && *value < 1) throw ValidationError(std::string(name) + " must be >= 1");
  }
  if (o.start_step && *o.start_step < 0) throw ValidationError("--start-step must be >= 0");
  require_file(o.manifest, "--manifest");
  const auto manifest = TrajectoryManifest::load(o.manifest);
  if (manifest.empty()) throw ValidationError("manifest has no checkpoints");

  AveragingPlan plan = AveragingPlan::defaults_for(manifest);
  if (o.k) plan.k = *o.k;
  if (o.nu) plan.nu = *o.nu;
  if (o.interval) plan.interval = *o.interval;
  if (o.start_step) {
    plan.start_step = *o.start_step;
  } else if (manifest.spacing() != 1000 && manifest.spacing() != 0) {
    plan.start_step = manifest.first_step() + (plan.k - 1) * plan.nu;
  }
  const auto policy = o.permissive ? MissingPolicy::Permissive : MissingPolicy::Skip;
  const auto preview = plan_windows(manifest, plan, policy);
  if (preview.windows.empty()) throw ValidationError("averaging plan produced no complete windows");
  for (const auto& w : preview.warnings) ctx.err << "warning: " << w << '\n';
  ctx.log("planned " + std::to_string(preview.windows.size()) + " windows, skipped " +
          std::to_string(preview.skipped.size()));

  manifest.verify_files();
  const auto result = derive_trajectory(manifest, plan, o.out_dir, {policy, ctx.threads});
  if (ctx.json) {
    ctx.out << nlohmann::json{{"manifest", (o.out_dir / "manifest.json").string()},
                              {"derived", result.manifest.size()},
                              {"plan", result.plan.to_json()}}
                   .dump(2)
            << '\n';
  } else {
    ctx.out << "derived " << result.manifest.size() << " checkpoints at steps " << result.manifest.first_step() << ".."
            << result.manifest.last_step() << " -> " << (o.out_dir / "manifest.json").string() << " (skipped "
            << result.plan.skipped.size() << " windows)\n";
  }
  return kExitOk;
}

// ---- ema -------------------------------------------------------------------

struct EmaOptions {
  fs::path manifest;
  fs::path out_dir;
  double decay = 0.9999;
};

inline int run_ema(const EmaOptions& o, const Context& ctx) {
  EmaConfig{o.decay}.validate();
  require_file(o.manifest, "--manifest");
  const auto manifest = TrajectoryManifest::load(o.manifest);
  if (manifest.empty()) throw ValidationError("manifest has no checkpoints");
  manifest.verify_files();
  const auto out = ema_trajectory(manifest, EmaConfig{o.decay}, o.out_dir);
  if (ctx.json) {
    ctx.out << nlohmann::json{{"manifest", (o.out_dir / "manifest.json").string()}, {"checkpoints", out.size()}}.dump(2)
            << '\n';
  } else {
    ctx.out << "wrote " << out.size() << " EMA checkpoints -> " << (o.out_dir / "manifest.json").string() << '\n';
  }
  return kExitOk;
}

// ---- lmc -------------------------------------------------------------------

struct LmcOptions {
  fs::path a, b, data;
  std::string alphas = "0,0.2,0.4,0.6,0.8,1";
  std::string model_family = "toy-linear";
  double tolerance = kDefaultBarrierTolerance;
  std::optional<fs::path> out;
};

inline int run_lmc(const LmcOptions& o, const Context& ctx) {
  const auto alphas = parse_number_list(o.alphas, "--alphas");
  validate_alphas(alphas);
  const auto family = parse_model_family(o.model_family);
  if (!(o.tolerance >= 0.0)) throw ValidationError("--tolerance must be >= 0");
  require_file(o.a, "--a");
  require_file(o.b, "--b");
  require_file(o.data, "--data");
  const Checkpoint a = read_checkpoint(o.a);
  const Checkpoint b = read_checkpoint(o.b);
  require_same_layout(a, b);
  const Dataset data = load_dataset(o.data);

  const LmcSweep s = sweep(a, b, alphas, loss_metric(data, family), ctx.threads);
  const Connectivity c = assess_connectivity(s, o.tolerance);
  if (o.out) write_text(*o.out, s.to_csv());
  if (ctx.json) {
    ctx.out << to_json(s, c).dump(2) << '\n';
  } else if (!o.out) {
    ctx.out << s.to_csv();
  } else {
    ctx.out << "barrier " << c.barrier << " (tau " << c.tau << "): " << (c.connected ? "connected" : "not connected")
            << '\n';
  }
  return kExitOk;
}

// ---- train-toy -------------------------------------------------------------

struct TrainToyOptions {
  fs::path out_dir;
  std::string optimizer = "sgd";
  std::optional<double> lr;
  std::size_t batch_size = 2;
  std::size_t samples = 1000;
  std::size_t epochs = 20;
  std::int64_t ckpt_every = 100;
  double true_w = 2.0, true_b = -1.0, noise = 0.1;
  bool sweep = false;
};

inline int run_train_toy(const TrainToyOptions& o, const Context& ctx) {
  ToyConfig config;
  config.optimizer = parse_optimizer(o.optimizer);
  config.lr = o.lr.value_or(toy_lr_presets(config.optimizer).front());
  config.batch_size = o.batch_size;
  config.n_samples = o.samples;
  config.epochs = o.epochs;
  config.seed = ctx.seed;
  config.ckpt_every = o.ckpt_every;
  config.true_w = o.true_w;
  config.true_b = o.true_b;
  config.noise_std = o.noise;
  config.validate();
  if (o.sweep && o.lr) throw ValidationError("--sweep and --lr are mutually exclusive");

  std::vector<std::pair<ToyConfig, fs::path>> runs;
  if (o.sweep) {
    for (double lr : toy_lr_presets(config.optimizer)) {
      ToyConfig c = config;
      c.lr = lr;
      runs.emplace_back(c, o.out_dir / ("lr-" + format_double(lr)));
    }
  } else {
    runs.emplace_back(config, o.out_dir);
  }
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& [c, dir] : runs) {
    ctx.log("training toy model (" + std::string(optimizer_name(c.optimizer)) + ", lr " + format_double(c.lr) + ")");
    const TrainRun run = train_toy(c, dir);
    summary.push_back({{"manifest", (dir / "manifest.json").string()},
                       {"lr", c.lr},
                       {"checkpoints", run.manifest.size()},
                       {"final_train_loss", run.loss_log.back().value}});
    if (!ctx.json) {
      ctx.out << "toy run lr=" << c.lr << ": " << run.manifest.size() << " checkpoints -> "
              << (dir / "manifest.json").string() << '\n';
    }
  }
  if (ctx.json) ctx.out << summary.dump(2) << '\n';
  return kExitOk;
}

// ---- train-classifier ------------------------------------------------------

struct TrainClassifierOptions {
  fs::path out_dir;
  ClassifierConfig config;
  std::string schedule = "constant";
  std::string dataset = "synthetic-blobs";
};

inline int run_train_classifier(TrainClassifierOptions o, const Context& ctx) {
  o.config.schedule = parse_schedule(o.schedule);
  if (o.dataset == "synthetic-blobs") {
    o.config.dataset = DatasetSource::SyntheticBlobs;
  } else if (o.dataset == "external-dir") {
    o.config.dataset = DatasetSource::ExternalDir;
  } else {
    throw ValidationError("unknown dataset '" + o.dataset + "' (synthetic-blobs | external-dir)");
  }
  o.config.seed = ctx.seed;
  o.config.validate();
  if (o.config.dataset == DatasetSource::ExternalDir) {
    require_file(o.config.data_dir / "train.safetensors", "--data-dir");
    require_file(o.config.data_dir / "heldout.safetensors", "--data-dir");
  }
  const TrainRun run = train_classifier(o.config, o.out_dir);
  if (ctx.json) {
    ctx.out << nlohmann::json{{"manifest", (o.out_dir / "manifest.json").string()},
                              {"checkpoints", run.manifest.size()},
                              {"final_train_loss", run.loss_log.back().value}}
                   .dump(2)
            << '\n';
  } else {
    ctx.out << "classifier run: " << run.manifest.size() << " checkpoints -> " << (o.out_dir / "manifest.json").string()
            << '\n';
  }
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalOptions {
  fs::path manifest, data;
  std::string model_family = "toy-linear";
  std::optional<fs::path> out;
};

inline int run_eval(const EvalOptions& o, const Context& ctx) {
  const auto family = parse_model_family(o.model_family);
  require_file(o.manifest, "--manifest");
  require_file(o.data, "--data");
  const auto manifest = TrajectoryManifest::load(o.manifest);
  const Dataset data = load_dataset(o.data);
  const EvalSeries series = eval_trajectory(manifest, data, family, ctx.threads);
  if (o.out) series.save_csv(*o.out);
  if (ctx.json) {
    ctx.out << series.to_json().dump(2) << '\n';
  } else if (!o.out) {
    ctx.out << series.to_csv();
  } else {
    ctx.out << "evaluated " << series.size() << " checkpoints -> " << o.out->string() << '\n';
  }
  return kExitOk;
}

// ---- spikes ----------------------------------------------------------------

struct SpikesOptions {
  fs::path series;
  std::size_t window = kDefaultSpikeWindow;
  double threshold = kDefaultSpikeThreshold;
  std::optional<fs::path> out;
};

inline int run_spikes(const SpikesOptions& o, const Context& ctx) {
  if (o.window < 3 || o.window % 2 == 0) throw ValidationError("--window must be odd and >= 3");
  if (!(o.threshold > 0.0)) throw ValidationError("--threshold must be > 0");
  require_file(o.series, "--series");
  const EvalSeries series = EvalSeries::load_csv(o.series);
  const SpikeReport report = detect_spikes(series, o.window, o.threshold);
  const std::string doc = report.to_json().dump(2) + "\n";
  if (o.out) write_text(*o.out, doc);
  if (ctx.json || !o.out) {
    ctx.out << doc;
  } else {
    ctx.out << report.spikes.size() << " spikes -> " << o.out->string() << '\n';
  }
  return kExitOk;
}

// ---- report ----------------------------------------------------------------

struct ReportOptions {
  fs::path original, derived;
  std::string profile = "pythia-6.9b";
  std::optional<double> gpu_hours;
  std::optional<std::int64_t> total_steps;
  std::string tolerances = "0,0.01,0.02,0.05,0.1";
  std::string original_dataset, derived_dataset;
  std::string metric = "loss";
  std::size_t spike_window = kDefaultSpikeWindow;
  double spike_threshold = kDefaultSpikeThreshold;
  std::optional<fs::path> out;
  std::optional<fs::path> csv;
};

inline int run_report(const ReportOptions& o, const Context& ctx) {
  HardwareProfile profile;
  if (o.gpu_hours || o.total_steps) {
    if (!o.gpu_hours || !o.total_steps) throw ValidationError("--gpu-hours and --total-steps go together");
    profile = {"custom", *o.gpu_hours, *o.total_steps};
  } else {
    profile = find_profile(o.profile);
  }
  profile.validate();
  const auto tolerances = parse_number_list(o.tolerances, "--tolerances");
  for (double t : tolerances) {
    if (!(t >= 0.0)) throw ValidationError("--tolerances must be non-negative");
  }
  if (o.original_dataset != o.derived_dataset) {
    throw ValidationError("dataset_id mismatch: '" + o.original_dataset + "' vs '" + o.derived_dataset + "'");
  }
  require_file(o.original, "--original");
  require_file(o.derived, "--derived");
  const auto original = EvalSeries::load_csv(o.original, o.metric, o.original_dataset);
  const auto derived = EvalSeries::load_csv(o.derived, o.metric, o.derived_dataset);
  if (original.empty() || derived.empty()) throw ValidationError("series must not be empty");

  std::optional<SpikeComparison> spikes;
  if (original.size() >= 3 && derived.size() >= 3) {
    spikes = SpikeComparison{detect_spikes(original, o.spike_window, o.spike_threshold),
                             detect_spikes(derived, o.spike_window, o.spike_threshold)};
  }
  const auto doc = build_report(original, derived, profile, spikes, tolerances);
  const std::string text = doc.dump(2) + "\n";
  if (o.out) write_text(*o.out, text);
  if (o.csv) write_text(*o.csv, savings_curve(original, derived, profile, tolerances).to_csv());
  if (ctx.json || !o.out) {
    ctx.out << text;
  } else {
    const auto& first = doc["savings"]["curve"][0];
    ctx.out << "report -> " << o.out->string() << " (eps=" << first["tolerance"].get<double>() << ": "
            << first["steps_saved"].get<std::int64_t>() << " steps, " << first["gpu_hours_saved"].get<double>()
            << " GPU-hours saved)\n";
  }
  return kExitOk;
}

// ---- dispatch --------------------------------------------------------------

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"lawa-kit: latest-weight averaging over training checkpoints", "lawa-kit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();

  std::uint64_t seed = 0;
  std::optional<unsigned> threads;
  bool verbose = false, json = false;
  app.add_option("--seed", seed, "Random seed for training subcommands");
  app.add_option("--threads", threads, "Worker threads (default: $LAWA_KIT_THREADS, else all cores)");
  app.add_flag("--verbose,-v", verbose, "Log progress to stderr");
  app.add_flag("--json", json, "Machine-readable JSON on stdout");

  AvgOptions avg;
  auto* avg_cmd = app.add_subcommand("avg", "Derive LAWA checkpoints from a trajectory manifest");
  avg_cmd->add_option("--manifest", avg.manifest, "Input trajectory manifest")->required();
  avg_cmd->add_option("--out-dir", avg.out_dir, "Output directory")->required();
  avg_cmd->add_option("--k", avg.k, "Checkpoints per window (default: 5)");
  avg_cmd->add_option("--nu", avg.nu, "Steps between window members (default: 1000, or the manifest spacing)");
  avg_cmd->add_option("--interval", avg.interval, "Steps between derived checkpoints (default: 3000, or 3x spacing)");
  avg_cmd->add_option("--start-step", avg.start_step,
                      "First output step (default: 21000 for 1000-step spacing, else first step + (k-1)*nu)");
  avg_cmd->add_flag("--permissive", avg.permissive, "Average the available members of windows with gaps");

  EmaOptions ema;
  auto* ema_cmd = app.add_subcommand("ema", "Exponential moving average over a trajectory");
  ema_cmd->add_option("--manifest", ema.manifest, "Input trajectory manifest")->required();
  ema_cmd->add_option("--out-dir", ema.out_dir, "Output directory")->required();
  ema_cmd->add_option("--decay", ema.decay, "Decay rate in [0, 1)");

  LmcOptions lmc;
  auto* lmc_cmd = app.add_subcommand("lmc", "Linear interpolation sweep between two checkpoints");
  lmc_cmd->add_option("--a", lmc.a, "Checkpoint at alpha = 1")->required();
  lmc_cmd->add_option("--b", lmc.b, "Checkpoint at alpha = 0")->required();
  lmc_cmd->add_option("--data", lmc.data, "Evaluation dataset (container with x, y)")->required();
  lmc_cmd->add_option("--alphas", lmc.alphas, "Comma-separated alpha grid");
  lmc_cmd->add_option("--model-family", lmc.model_family, "toy-linear | mlp-classifier");
  lmc_cmd->add_option("--tolerance", lmc.tolerance, "Barrier tolerance as a fraction of the chord midpoint");
  lmc_cmd->add_option("--out", lmc.out, "Write the alpha,metric CSV here instead of stdout");

  TrainToyOptions toy;
  auto* toy_cmd = app.add_subcommand("train-toy", "Train the 1-D linear toy model");
  toy_cmd->add_option("--out-dir", toy.out_dir, "Run directory")->required();
  toy_cmd->add_option("--optimizer", toy.optimizer, "sgd | adam");
  toy_cmd->add_option("--lr", toy.lr, "Learning rate (default: 0.18 for sgd, 0.5 for adam)");
  toy_cmd->add_option("--batch-size", toy.batch_size, "Minibatch size");
  toy_cmd->add_option("--samples", toy.samples, "Training samples");
  toy_cmd->add_option("--epochs", toy.epochs, "Epochs");
  toy_cmd->add_option("--ckpt-every", toy.ckpt_every, "Steps between checkpoints");
  toy_cmd->add_option("--true-w", toy.true_w, "Data-generating slope");
  toy_cmd->add_option("--true-b", toy.true_b, "Data-generating intercept");
  toy_cmd->add_option("--noise", toy.noise, "Label noise standard deviation");
  toy_cmd->add_flag("--sweep", toy.sweep, "Train every preset lr (sgd: 0.18,0.12,0.01; adam: 0.5,0.3,0.05)");

  TrainClassifierOptions cls;
  auto* cls_cmd = app.add_subcommand("train-classifier", "Train the MLP classifier with SGD + momentum");
  cls_cmd->add_option("--out-dir", cls.out_dir, "Run directory")->required();
  cls_cmd->add_option("--lr", cls.config.lr, "Peak learning rate");
  cls_cmd->add_option("--momentum", cls.config.momentum, "Momentum");
  cls_cmd->add_option("--weight-decay", cls.config.weight_decay, "L2 weight decay");
  cls_cmd->add_option("--batch-size", cls.config.batch_size, "Minibatch size");
  cls_cmd->add_option("--epochs", cls.config.epochs, "Epochs");
  cls_cmd->add_option("--schedule", cls.schedule, "constant | step-decay (x0.1 at 50% and 75% of epochs)");
  cls_cmd->add_option("--ckpt-every", cls.config.ckpt_every, "Steps between checkpoints");
  cls_cmd->add_option("--dataset", cls.dataset, "synthetic-blobs | external-dir");
  cls_cmd->add_option("--data-dir", cls.config.data_dir, "Directory with train.safetensors and heldout.safetensors");
  cls_cmd->add_option("--train-samples", cls.config.train_samples, "Synthetic training samples");
  cls_cmd->add_option("--heldout-samples", cls.config.heldout_samples, "Synthetic held-out samples");
  cls_cmd->add_option("--blob-spread", cls.config.blob_spread, "Standard deviation of synthetic class centers");

  EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate every checkpoint of a manifest");
  eval_cmd->add_option("--manifest", ev.manifest, "Trajectory manifest")->required();
  eval_cmd->add_option("--data", ev.data, "Evaluation dataset")->required();
  eval_cmd->add_option("--model-family", ev.model_family, "toy-linear | mlp-classifier");
  eval_cmd->add_option("--out", ev.out, "Write the step,value CSV here instead of stdout");

  SpikesOptions sp;
  auto* spikes_cmd = app.add_subcommand("spikes", "Detect metric spikes with a rolling median");
  spikes_cmd->add_option("--series", sp.series, "step,value CSV")->required();
  spikes_cmd->add_option("--window", sp.window, "Odd rolling-median window");
  spikes_cmd->add_option("--threshold", sp.threshold, "Excess over the median, as a fraction");
  spikes_cmd->add_option("--out", sp.out, "Write the spike report JSON here");

  ReportOptions rep;
  auto* report_cmd = app.add_subcommand("report", "Savings report comparing original and derived series");
  report_cmd->add_option("--original", rep.original, "Original step,value CSV")->required();
  report_cmd->add_option("--derived", rep.derived, "Derived step,value CSV")->required();
  report_cmd->add_option("--profile", rep.profile, "pythia-1b | pythia-2.8b | pythia-6.9b | pythia-12b");
  report_cmd->add_option("--gpu-hours", rep.gpu_hours, "Custom profile: total GPU hours");
  report_cmd->add_option("--total-steps", rep.total_steps, "Custom profile: total training steps");
  report_cmd->add_option("--tolerances", rep.tolerances, "Comma-separated fractional increases over the final metric");
  report_cmd->add_option("--original-dataset", rep.original_dataset, "Dataset id of the original series");
  report_cmd->add_option("--derived-dataset", rep.derived_dataset, "Dataset id of the derived series");
  report_cmd->add_option("--metric", rep.metric, "Metric name");
  report_cmd->add_option("--spike-window", rep.spike_window, "Rolling-median window for spike comparison");
  report_cmd->add_option("--spike-threshold", rep.spike_threshold, "Spike threshold");
  report_cmd->add_option("--out", rep.out, "Write the report JSON here");
  report_cmd->add_option("--csv", rep.csv, "Write the savings curve CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* target = &app;
    for (auto* sub : app.get_subcommands()) target = sub;
    err << target->help();
    return kExitValidation;
  }

  try {
    Context ctx{out, err, json, verbose, seed, resolve_threads(threads)};
    if (*avg_cmd) return run_avg(avg, ctx);
    if (*ema_cmd) return run_ema(ema, ctx);
    if (*lmc_cmd) return run_lmc(lmc, ctx);
    if (*toy_cmd) return run_train_toy(toy, ctx);
    if (*cls_cmd) return run_train_classifier(cls, ctx);
    if (*eval_cmd) return run_eval(ev, ctx);
    if (*spikes_cmd) return run_spikes(sp, ctx);
    if (*report_cmd) return run_report(rep, ctx);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace lawa::cli
