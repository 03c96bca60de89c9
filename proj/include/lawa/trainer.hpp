#pragma once

// Desk-scale training runs that emit checkpoint trajectories.
//
// Every run directory holds:
//   init.safetensors             parameters before the first update (step 0)
//   ckpt-step-<N>.safetensors    one per ckpt_every updates
//   manifest.json                trajectory manifest over the ckpt-step files
//   train.safetensors            training set snapshot
//   heldout.safetensors          held-out set snapshot
//   loss.csv                     step,loss (minibatch loss of update N, measured before it)
//   config.json
// Runs are single-threaded and bit-reproducible for a fixed seed.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lawa/averaging.hpp"
#include "lawa/error.hpp"
#include "lawa/evaluation.hpp"
#include "lawa/manifest.hpp"
#include "lawa/models.hpp"
#include "lawa/optim.hpp"
#include "lawa/rng.hpp"
#include "lawa/tensor_store.hpp"

namespace lawa {

// Fixed RNG stream ids so each random source can be reproduced on its own.
namespace streams {
inline constexpr std::uint64_t kTrainData = 1;
inline constexpr std::uint64_t kHeldoutData = 2;
inline constexpr std::uint64_t kShuffle = 3;
inline constexpr std::uint64_t kInit = 4;
inline constexpr std::uint64_t kCenters = 5;
}  // namespace streams

enum class OptimizerKind { Sgd, Adam };

inline std::string_view optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  throw ValidationError("unknown optimizer '" + std::string(name) + "' (sgd | adam)");
}

// Learning rates swept for the toy model, per optimizer.
inline std::vector<double> toy_lr_presets(OptimizerKind k) {
  return k == OptimizerKind::Sgd ? std::vector<double>{0.18, 0.12, 0.01} : std::vector<double>{0.5, 0.3, 0.05};
}

struct ToyConfig {
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double lr = 0.18;
  std::size_t batch_size = 2;
  std::size_t n_samples = 1000;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  std::int64_t ckpt_every = 100;
  // y = true_w * x + true_b + N(0, noise_std^2), x ~ N(0, 1)
  double true_w = 2.0;
  double true_b = -1.0;
  double noise_std = 0.1;
  std::size_t heldout_samples = 1000;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("lr must be a finite non-negative number");
    if (batch_size == 0 || n_samples == 0 || epochs == 0 || heldout_samples == 0) {
      throw ValidationError("batch size, sample counts and epochs must be positive");
    }
    if (batch_size > n_samples) throw ValidationError("batch size must not exceed the number of samples");
    if (ckpt_every < 1) throw ValidationError("ckpt_every must be >= 1");
    if (!(noise_std >= 0.0)) throw ValidationError("noise_std must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"model", "toy-linear"},       {"optimizer", optimizer_name(optimizer)},
            {"lr", lr},                    {"batch_size", batch_size},
            {"n_samples", n_samples},      {"epochs", epochs},
            {"seed", seed},                {"ckpt_every", ckpt_every},
            {"true_w", true_w},            {"true_b", true_b},
            {"noise_std", noise_std},      {"heldout_samples", heldout_samples}};
  }
};

enum class LrSchedule { Constant, StepDecay };
enum class DatasetSource { SyntheticBlobs, ExternalDir };

inline LrSchedule parse_schedule(std::string_view name) {
  if (name == "constant") return LrSchedule::Constant;
  if (name == "step-decay") return LrSchedule::StepDecay;
  throw ValidationError("unknown lr schedule '" + std::string(name) + "' (constant | step-decay)");
}

struct ClassifierConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  std::size_t epochs = 200;
  LrSchedule schedule = LrSchedule::Constant;
  std::uint64_t seed = 0;
  std::int64_t ckpt_every = 40;
  DatasetSource dataset = DatasetSource::SyntheticBlobs;
  fs::path data_dir;  // ExternalDir: train.safetensors + heldout.safetensors
  MlpShape model;
  std::size_t train_samples = 5000;
  std::size_t heldout_samples = 1000;
  double blob_spread = 0.45;  // stddev of class centers; within-class noise is 1

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("lr must be a finite non-negative number");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight decay must be >= 0");
    if (batch_size == 0 || epochs == 0) throw ValidationError("batch size and epochs must be positive");
    if (ckpt_every < 1) throw ValidationError("ckpt_every must be >= 1");
    if (dataset == DatasetSource::SyntheticBlobs && (train_samples == 0 || heldout_samples == 0)) {
      throw ValidationError("sample counts must be positive");
    }
    if (dataset == DatasetSource::ExternalDir && data_dir.empty()) throw ValidationError("external dataset needs a data dir");
    for (auto m : milestones()) {
      if (m > epochs) throw ValidationError("lr milestone beyond the last epoch");
    }
  }

  // Epochs at which the lr is multiplied by 0.1 (50% and 75% of training).
  std::vector<std::size_t> milestones() const {
    if (schedule == LrSchedule::Constant) return {};
    return {epochs / 2, (3 * epochs) / 4};
  }

  double lr_at_epoch(std::size_t epoch) const {
    double rate = lr;
    for (auto m : milestones()) {
      if (epoch >= m) rate *= 0.1;
    }
    return rate;
  }

  nlohmann::json to_json() const {
    return {{"model", "mlp-classifier"},
            {"lr", lr},
            {"momentum", momentum},
            {"weight_decay", weight_decay},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"schedule", schedule == LrSchedule::Constant ? "constant" : "step-decay"},
            {"seed", seed},
            {"ckpt_every", ckpt_every},
            {"dataset", dataset == DatasetSource::SyntheticBlobs ? "synthetic-blobs" : "external-dir"},
            {"data_dir", data_dir.string()},
            {"layers", {model.input, model.hidden1, model.hidden2, model.classes}},
            {"train_samples", train_samples},
            {"heldout_samples", heldout_samples},
            {"blob_spread", blob_spread}};
  }
};

struct TrainRun {
  TrajectoryManifest manifest;
  EvalSeries loss_log;
  fs::path run_dir;
  fs::path init_path;
  fs::path train_path;
  fs::path heldout_path;
};

inline Dataset generate_toy_data(const ToyConfig& config, std::size_t n, std::uint64_t stream_id) {
  Rng rng = Rng::stream(config.seed, stream_id);
  Dataset d;
  d.id = "toy-linear-seed" + std::to_string(config.seed) + (stream_id == streams::kTrainData ? "-train" : "-heldout");
  d.dim = 1;
  d.x.resize(n);
  d.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.x[i] = rng.normal();
    d.y[i] = config.true_w * d.x[i] + config.true_b + config.noise_std * rng.normal();
  }
  return d;
}

// Ten Gaussian blobs: shared class centers, unit within-class noise.
inline Dataset generate_blobs(const ClassifierConfig& config, std::size_t n, std::uint64_t stream_id) {
  Rng centers_rng = Rng::stream(config.seed, streams::kCenters);
  const std::size_t dim = config.model.input, classes = config.model.classes;
  std::vector<double> centers(classes * dim);
  for (auto& c : centers) c = config.blob_spread * centers_rng.normal();

  Rng rng = Rng::stream(config.seed, stream_id);
  Dataset d;
  d.id = "blobs-seed" + std::to_string(config.seed) + (stream_id == streams::kTrainData ? "-train" : "-heldout");
  d.dim = dim;
  d.x.resize(n * dim);
  d.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = static_cast<std::size_t>(rng.below(classes));
    d.y[i] = static_cast<double>(label);
    for (std::size_t j = 0; j < dim; ++j) d.x[i * dim + j] = centers[label * dim + j] + rng.normal();
  }
  return d;
}

// Sample order for one epoch: a fresh Fisher-Yates shuffle of 0..n-1.
inline std::vector<std::size_t> epoch_order(Rng& shuffle_rng, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  shuffle_rng.shuffle(order);
  return order;
}

namespace detail {

inline bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

inline void write_json(const fs::path& path, const nlohmann::json& doc) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

inline fs::path checkpoint_path(const fs::path& dir, std::int64_t step) {
  return dir / ("ckpt-step-" + std::to_string(step) + ".safetensors");
}

inline TrainRun begin_run(const fs::path& out_dir, const std::string& model, const Dataset& train, const Dataset& heldout) {
  ensure_output_dir(out_dir);
  TrainRun run;
  run.run_dir = out_dir;
  run.manifest.model = model;
  run.init_path = out_dir / "init.safetensors";
  run.train_path = out_dir / "train.safetensors";
  run.heldout_path = out_dir / "heldout.safetensors";
  save_dataset(train, run.train_path);
  save_dataset(heldout, run.heldout_path);
  run.loss_log.metric_name = "train_loss";
  run.loss_log.dataset_id = train.id;
  return run;
}

inline void finish_run(TrainRun& run) {
  run.manifest.save(run.run_dir / "manifest.json");
  run.loss_log.save_csv(run.run_dir / "loss.csv");
}

}  // namespace detail

inline TrainRun train_toy(const ToyConfig& config, const fs::path& out_dir) {
  config.validate();
  const Dataset train = generate_toy_data(config, config.n_samples, streams::kTrainData);
  const Dataset heldout = generate_toy_data(config, config.heldout_samples, streams::kHeldoutData);
  TrainRun run = detail::begin_run(out_dir, "toy-linear", train, heldout);
  detail::write_json(out_dir / "config.json", config.to_json());

  const auto& layout = ToyLinear::layout();
  std::vector<float> params(layout_size(layout), 0.0f);
  std::vector<float> grad(params.size());
  write_checkpoint(pack_checkpoint(layout, params, 0), run.init_path);

  SgdMomentum<float> sgd{static_cast<float>(config.lr), 0.0f, 0.0f, {}};
  Adam<float> adam{{config.lr, 0.9, 0.999, 1e-8}, {}, {}, 0};

  Rng shuffle_rng = Rng::stream(config.seed, streams::kShuffle);
  std::vector<float> xs, ys;
  std::int64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = epoch_order(shuffle_rng, train.size());
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      xs.clear();
      ys.clear();
      for (std::size_t i = start; i < end; ++i) {
        xs.push_back(static_cast<float>(train.x[order[i]]));
        ys.push_back(static_cast<float>(train.y[order[i]]));
      }
      const float loss = ToyLinear::loss_and_grad(params, xs, ys, grad);
      ++step;
      if (!std::isfinite(loss)) throw Error("toy training diverged at step " + std::to_string(step));
      run.loss_log.points.push_back({step, loss});
      if (config.optimizer == OptimizerKind::Sgd) {
        sgd.step(params, grad);
      } else {
        adam.step(params, grad);
      }
      if (!detail::all_finite(params)) throw Error("toy training diverged at step " + std::to_string(step));
      if (step % config.ckpt_every == 0) {
        const auto path = detail::checkpoint_path(out_dir, step);
        write_checkpoint(pack_checkpoint(layout, params, step), path);
        run.manifest.checkpoints.push_back({step, path});
      }
    }
  }
  detail::finish_run(run);
  return run;
}

inline std::pair<Dataset, Dataset> classifier_datasets(const ClassifierConfig& config) {
  if (config.dataset == DatasetSource::SyntheticBlobs) {
    return {generate_blobs(config, config.train_samples, streams::kTrainData),
            generate_blobs(config, config.heldout_samples, streams::kHeldoutData)};
  }
  Dataset train = load_dataset(config.data_dir / "train.safetensors");
  Dataset heldout = load_dataset(config.data_dir / "heldout.safetensors");
  for (const Dataset* d : {&train, &heldout}) {
    if (d->dim != config.model.input) {
      throw ValidationError("dataset dimensions mismatch model input: " + std::to_string(d->dim) + " features vs " +
                            std::to_string(config.model.input));
    }
  }
  return {std::move(train), std::move(heldout)};
}

inline TrainRun train_classifier(const ClassifierConfig& config, const fs::path& out_dir) {
  config.validate();
  auto [train, heldout] = classifier_datasets(config);
  const Mlp model(config.model);
  model.check_dataset(train);
  model.check_dataset(heldout);
  TrainRun run = detail::begin_run(out_dir, "mlp-classifier", train, heldout);
  detail::write_json(out_dir / "config.json", config.to_json());

  Rng init_rng = Rng::stream(config.seed, streams::kInit);
  std::vector<float> params = model.init(init_rng);
  std::vector<float> grad(params.size());
  write_checkpoint(pack_checkpoint(model.layout(), params, 0), run.init_path);

  SgdMomentum<float> sgd{static_cast<float>(config.lr), static_cast<float>(config.momentum),
                         static_cast<float>(config.weight_decay), {}};
  Rng shuffle_rng = Rng::stream(config.seed, streams::kShuffle);
  const std::size_t dim = model.shape().input;
  std::vector<float> xs;
  std::vector<std::uint32_t> labels;
  std::int64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    sgd.lr = static_cast<float>(config.lr_at_epoch(epoch));
    const auto order = epoch_order(shuffle_rng, train.size());
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      xs.clear();
      labels.clear();
      for (std::size_t i = start; i < end; ++i) {
        const double* row = train.row(order[i]);
        for (std::size_t j = 0; j < dim; ++j) xs.push_back(static_cast<float>(row[j]));
        labels.push_back(static_cast<std::uint32_t>(train.y[order[i]]));
      }
      const float loss = model.loss_and_grad(params, xs, labels, grad);
      ++step;
      if (!std::isfinite(loss)) throw Error("classifier training diverged at step " + std::to_string(step));
      run.loss_log.points.push_back({step, loss});
      sgd.step(params, grad);
      if (!detail::all_finite(params)) throw Error("classifier training diverged at step " + std::to_string(step));
      if (step % config.ckpt_every == 0) {
        const auto path = detail::checkpoint_path(out_dir, step);
        write_checkpoint(pack_checkpoint(model.layout(), params, step), path);
        run.manifest.checkpoints.push_back({step, path});
      }
    }
  }
  detail::finish_run(run);
  return run;
}

}  // namespace lawa
