#pragma once

// Desk-scale models: a 1-D linear regressor (w, b) and a two-hidden-layer ReLU
// MLP classifier. Both keep parameters in one flat buffer described by a
// named layout so optimizers see a single span and checkpoints see named
// tensors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lawa/error.hpp"
#include "lawa/rng.hpp"
#include "lawa/tensor_store.hpp"

namespace lawa {

enum class ModelFamily { ToyLinear, MlpClassifier };

inline std::string_view model_family_name(ModelFamily f) {
  return f == ModelFamily::ToyLinear ? "toy-linear" : "mlp-classifier";
}

inline ModelFamily parse_model_family(std::string_view name) {
  if (name == "toy-linear") return ModelFamily::ToyLinear;
  if (name == "mlp-classifier") return ModelFamily::MlpClassifier;
  throw ValidationError("unknown model family '" + std::string(name) + "' (toy-linear | mlp-classifier)");
}

// Row-major features (n x dim) and one target per row. For classifiers the
// targets are class indices stored as doubles.
struct Dataset {
  std::string id;
  std::size_t dim = 0;
  std::vector<double> x;
  std::vector<double> y;

  std::size_t size() const { return y.size(); }
  const double* row(std::size_t i) const { return x.data() + i * dim; }
};

// Datasets are stored in the checkpoint container as "x" [n, dim] and "y" [n].
inline void save_dataset(const Dataset& data, const fs::path& path) {
  Checkpoint ckpt;
  ckpt.add("x", Tensor::from_values(DType::F64, {data.size(), data.dim}, data.x));
  ckpt.add("y", Tensor::from_values(DType::F64, {data.size()}, data.y));
  ckpt.metadata["dataset_id"] = data.id;
  write_checkpoint(ckpt, path);
}

inline Dataset load_dataset(const fs::path& path) {
  Checkpoint ckpt = read_checkpoint(path);
  auto x = ckpt.tensors.find("x");
  auto y = ckpt.tensors.find("y");
  if (x == ckpt.tensors.end() || y == ckpt.tensors.end()) throw FormatError(path.string() + " is not a dataset (needs x and y)");
  const auto& xs = x->second.shape();
  const auto& ys = y->second.shape();
  if (xs.size() != 2 || ys.size() != 1 || xs[0] != ys[0]) throw FormatError(path.string() + ": dataset x/y shapes disagree");
  Dataset d;
  d.dim = xs[1];
  d.x = x->second.to_f64();
  d.y = y->second.to_f64();
  auto id = ckpt.metadata.find("dataset_id");
  d.id = id != ckpt.metadata.end() ? id->second : path.stem().string();
  return d;
}

struct ParamSlot {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

using ParamLayout = std::vector<ParamSlot>;

inline std::size_t layout_size(const ParamLayout& layout) {
  return layout.empty() ? 0 : layout.back().offset + layout.back().size;
}

// F32 checkpoint with one tensor per slot.
inline Checkpoint pack_checkpoint(const ParamLayout& layout, std::span<const float> params, std::int64_t step) {
  if (params.size() != layout_size(layout)) throw ValidationError("parameter buffer does not match model layout");
  Checkpoint ckpt;
  for (const auto& slot : layout) ckpt.add(slot.name, Tensor::from_f32(slot.shape, params.subspan(slot.offset, slot.size)));
  ckpt.set_step(step);
  return ckpt;
}

// Flat parameters widened to T; throws if the checkpoint does not follow the layout.
template <class T>
std::vector<T> unpack_checkpoint(const ParamLayout& layout, const Checkpoint& ckpt) {
  if (ckpt.tensors.size() != layout.size()) throw ValidationError("checkpoint does not match model parameter schema");
  std::vector<T> flat(layout_size(layout));
  for (const auto& slot : layout) {
    auto it = ckpt.tensors.find(slot.name);
    if (it == ckpt.tensors.end()) throw ValidationError("checkpoint lacks parameter '" + slot.name + "'");
    if (it->second.shape() != slot.shape) throw ValidationError("parameter '" + slot.name + "' has the wrong shape");
    for (std::size_t i = 0; i < slot.size; ++i) flat[slot.offset + i] = static_cast<T>(it->second.at(i));
  }
  return flat;
}

// y_hat = w * x + b, trained with mean squared error.
struct ToyLinear {
  static const ParamLayout& layout() {
    static const ParamLayout l{{"b", {1}, 0, 1}, {"w", {1}, 1, 1}};
    return l;
  }
  static constexpr std::size_t kBias = 0;
  static constexpr std::size_t kWeight = 1;

  // Mean of (w x + b - y)^2 over the batch; writes d/dw, d/db into grad.
  static float loss_and_grad(std::span<const float> params, std::span<const float> xs, std::span<const float> ys,
                             std::span<float> grad) {
    const float w = params[kWeight], b = params[kBias];
    float loss = 0.0f, gw = 0.0f, gb = 0.0f;
    const float inv_n = 1.0f / static_cast<float>(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const float err = w * xs[i] + b - ys[i];
      loss += err * err;
      gw += err * xs[i];
      gb += err;
    }
    grad[kWeight] = 2.0f * gw * inv_n;
    grad[kBias] = 2.0f * gb * inv_n;
    return loss * inv_n;
  }

  static double mean_loss(std::span<const double> params, const Dataset& data) {
    if (data.size() == 0) throw ValidationError("empty dataset");
    if (data.dim != 1) throw ValidationError("toy-linear expects 1-D inputs");
    double sum = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double err = params[kWeight] * data.x[i] + params[kBias] - data.y[i];
      sum += err * err;
    }
    return sum / static_cast<double>(data.size());
  }
};

struct MlpShape {
  std::size_t input = 32;
  std::size_t hidden1 = 128;
  std::size_t hidden2 = 128;
  std::size_t classes = 10;
};

// input -> fc1 -> ReLU -> fc2 -> ReLU -> fc3 -> softmax cross-entropy.
// Weights are [out, in] row-major.
class Mlp {
 public:
  explicit Mlp(MlpShape shape = {}) : shape_(shape) {
    const std::size_t dims[4] = {shape.input, shape.hidden1, shape.hidden2, shape.classes};
    std::size_t offset = 0;
    // canonical (sorted) order: fc1.bias, fc1.weight, fc2.bias, ...
    for (int l = 0; l < 3; ++l) {
      const std::string prefix = "fc" + std::to_string(l + 1);
      layout_.push_back({prefix + ".bias", {dims[l + 1]}, offset, dims[l + 1]});
      offset += dims[l + 1];
      layout_.push_back({prefix + ".weight", {dims[l + 1], dims[l]}, offset, dims[l + 1] * dims[l]});
      offset += dims[l + 1] * dims[l];
    }
  }

  const MlpShape& shape() const { return shape_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t num_params() const { return layout_size(layout_); }

  // Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  std::vector<float> init(Rng& rng) const {
    std::vector<float> params(num_params());
    for (std::size_t s = 0; s < layout_.size(); ++s) {
      const auto& slot = layout_[s];
      const std::size_t fan_in = layout_[s | 1].shape[1];
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (std::size_t i = 0; i < slot.size; ++i) params[slot.offset + i] = static_cast<float>(rng.uniform(-bound, bound));
    }
    return params;
  }

  template <class T>
  struct Activations {
    std::vector<T> h1, h2, logits;
  };

  // Forward pass for one sample; activations are kept for backprop.
  template <class T>
  void forward(std::span<const T> params, const T* x, Activations<T>& act) const {
    act.h1.resize(shape_.hidden1);
    act.h2.resize(shape_.hidden2);
    act.logits.resize(shape_.classes);
    dense(params, 0, x, shape_.input, act.h1.data(), shape_.hidden1, true);
    dense(params, 2, act.h1.data(), shape_.hidden1, act.h2.data(), shape_.hidden2, true);
    dense(params, 4, act.h2.data(), shape_.hidden2, act.logits.data(), shape_.classes, false);
  }

  // -log softmax(logits)[label]
  template <class T>
  static T cross_entropy(std::span<const T> logits, std::size_t label) {
    T max = logits[0];
    for (T z : logits) max = std::max(max, z);
    T sum = 0;
    for (T z : logits) sum += std::exp(z - max);
    return std::log(sum) + max - logits[label];
  }

  // Mean cross-entropy over a batch (rows of xs), gradient written to grad.
  float loss_and_grad(std::span<const float> params, std::span<const float> xs, std::span<const std::uint32_t> labels,
                      std::span<float> grad) const {
    std::fill(grad.begin(), grad.end(), 0.0f);
    const std::size_t batch = labels.size();
    const float inv_b = 1.0f / static_cast<float>(batch);
    Activations<float> act;
    std::vector<float> dlogits(shape_.classes), dh2(shape_.hidden2), dh1(shape_.hidden1);
    float loss = 0.0f;
    for (std::size_t n = 0; n < batch; ++n) {
      const float* x = xs.data() + n * shape_.input;
      forward<float>(params, x, act);
      const std::uint32_t label = labels[n];
      if (label >= shape_.classes) throw ValidationError("class label out of range");
      loss += cross_entropy<float>(act.logits, label);

      float max = act.logits[0];
      for (float z : act.logits) max = std::max(max, z);
      float sum = 0.0f;
      for (std::size_t c = 0; c < shape_.classes; ++c) sum += (dlogits[c] = std::exp(act.logits[c] - max));
      for (std::size_t c = 0; c < shape_.classes; ++c) dlogits[c] = (dlogits[c] / sum - (c == label ? 1.0f : 0.0f)) * inv_b;

      backward_dense(params, grad, 4, act.h2.data(), shape_.hidden2, dlogits.data(), shape_.classes, dh2.data());
      for (std::size_t j = 0; j < shape_.hidden2; ++j) if (act.h2[j] <= 0.0f) dh2[j] = 0.0f;
      backward_dense(params, grad, 2, act.h1.data(), shape_.hidden1, dh2.data(), shape_.hidden2, dh1.data());
      for (std::size_t j = 0; j < shape_.hidden1; ++j) if (act.h1[j] <= 0.0f) dh1[j] = 0.0f;
      backward_dense(params, grad, 0, x, shape_.input, dh1.data(), shape_.hidden1, nullptr);
    }
    return loss * inv_b;
  }

  // Mean cross-entropy in double precision.
  double mean_loss(std::span<const double> params, const Dataset& data) const {
    check_dataset(data);
    Activations<double> act;
    double sum = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      forward<double>(params, data.row(i), act);
      sum += cross_entropy<double>(act.logits, static_cast<std::size_t>(data.y[i]));
    }
    return sum / static_cast<double>(data.size());
  }

  double accuracy(std::span<const double> params, const Dataset& data) const {
    check_dataset(data);
    Activations<double> act;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      forward<double>(params, data.row(i), act);
      auto best = std::max_element(act.logits.begin(), act.logits.end()) - act.logits.begin();
      correct += static_cast<std::size_t>(best) == static_cast<std::size_t>(data.y[i]);
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
  }

  void check_dataset(const Dataset& data) const {
    if (data.size() == 0) throw ValidationError("empty dataset");
    if (data.dim != shape_.input) {
      throw ValidationError("dataset has " + std::to_string(data.dim) + " features but the model expects " +
                            std::to_string(shape_.input));
    }
    for (double label : data.y) {
      if (!(label >= 0.0) || label >= static_cast<double>(shape_.classes) || label != std::floor(label)) {
        throw ValidationError("dataset labels must be class indices in [0, " + std::to_string(shape_.classes) + ")");
      }
    }
  }

 private:
  // out = W x + b (slots: bias at `slot`, weight at `slot + 1`), optional ReLU.
  template <class T>
  void dense(std::span<const T> params, std::size_t slot, const T* in, std::size_t n_in, T* out, std::size_t n_out,
             bool relu) const {
    const T* bias = params.data() + layout_[slot].offset;
    const T* weight = params.data() + layout_[slot + 1].offset;
    for (std::size_t o = 0; o < n_out; ++o) {
      const T* row = weight + o * n_in;
      T acc = 0;
      for (std::size_t i = 0; i < n_in; ++i) acc += row[i] * in[i];
      acc += bias[o];
      out[o] = relu && acc < T(0) ? T(0) : acc;
    }
  }

  // Accumulates dW += dout * in^T, db += dout and, if din is set, din = W^T dout.
  void backward_dense(std::span<const float> params, std::span<float> grad, std::size_t slot, const float* in,
                      std::size_t n_in, const float* dout, std::size_t n_out, float* din) const {
    float* gbias = grad.data() + layout_[slot].offset;
    float* gweight = grad.data() + layout_[slot + 1].offset;
    const float* weight = params.data() + layout_[slot + 1].offset;
    if (din) std::fill(din, din + n_in, 0.0f);
    for (std::size_t o = 0; o < n_out; ++o) {
      const float d = dout[o];
      gbias[o] += d;
      if (d == 0.0f) continue;
      float* grow = gweight + o * n_in;
      const float* wrow = weight + o * n_in;
      for (std::size_t i = 0; i < n_in; ++i) grow[i] += d * in[i];
      if (din) for (std::size_t i = 0; i < n_in; ++i) din[i] += wrow[i] * d;
    }
  }

  MlpShape shape_;
  ParamLayout layout_;
};

// Infers the MLP shape from checkpoint tensor shapes.
inline MlpShape mlp_shape_of(const Checkpoint& ckpt) {
  auto get = [&](const char* name) -> const Shape& {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end() || it->second.shape().size() != 2) {
      throw ValidationError(std::string("checkpoint lacks MLP parameter '") + name + "'");
    }
    return it->second.shape();
  };
  const Shape& w1 = get("fc1.weight");
  const Shape& w2 = get("fc2.weight");
  const Shape& w3 = get("fc3.weight");
  if (w2[1] != w1[0] || w3[1] != w2[0]) throw ValidationError("MLP layer shapes do not chain");
  return {w1[1], w1[0], w2[0], w3[0]};
}

}  // namespace lawa
