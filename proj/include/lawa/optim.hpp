#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <vector>

#include "lawa/error.hpp"

namespace lawa {

namespace detail {
inline void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ValidationError(std::string("shape mismatch between parameters and ") + what);
}
}  // namespace detail

// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
//   v <- momentum * v + (grad + weight_decay * param)
//   param <- param - lr * v
template <std::floating_point T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, T lr, T momentum, T weight_decay) {
  detail::require_same_size(params.size(), grads.size(), "gradients");
  detail::require_same_size(params.size(), velocity.size(), "momentum buffer");
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + (grads[i] + weight_decay * params[i]);
    params[i] = params[i] - lr * velocity[i];
  }
}

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam. `t` is the 1-based step count after this update.
template <std::floating_point T>
void adam_step(std::span<T> params, std::span<const T> grads, std::span<T> first_moment, std::span<T> second_moment,
               const AdamHyper& hyper, std::int64_t t) {
  if (t < 1) throw ValidationError("Adam step count must be >= 1");
  detail::require_same_size(params.size(), grads.size(), "gradients");
  detail::require_same_size(params.size(), first_moment.size(), "first moment");
  detail::require_same_size(params.size(), second_moment.size(), "second moment");
  const T b1 = static_cast<T>(hyper.beta1);
  const T b2 = static_cast<T>(hyper.beta2);
  const T lr = static_cast<T>(hyper.lr);
  const T eps = static_cast<T>(hyper.eps);
  const T correction1 = static_cast<T>(1.0 - std::pow(hyper.beta1, static_cast<double>(t)));
  const T correction2 = static_cast<T>(1.0 - std::pow(hyper.beta2, static_cast<double>(t)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    first_moment[i] = b1 * first_moment[i] + (T(1) - b1) * g;
    second_moment[i] = b2 * second_moment[i] + (T(1) - b2) * g * g;
    const T m_hat = first_moment[i] / correction1;
    const T v_hat = second_moment[i] / correction2;
    params[i] = params[i] - lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

template <std::floating_point T>
struct SgdMomentum {
  T lr = T(0.1);
  T momentum = T(0);
  T weight_decay = T(0);
  std::vector<T> velocity;

  void step(std::span<T> params, std::span<const T> grads) {
    if (velocity.size() != params.size()) velocity.assign(params.size(), T(0));
    sgd_step<T>(params, grads, velocity, lr, momentum, weight_decay);
  }
};

template <std::floating_point T>
struct Adam {
  AdamHyper hyper;
  std::vector<T> first_moment;
  std::vector<T> second_moment;
  std::int64_t t = 0;

  void step(std::span<T> params, std::span<const T> grads) {
    if (first_moment.size() != params.size()) {
      first_moment.assign(params.size(), T(0));
      second_moment.assign(params.size(), T(0));
    }
    adam_step<T>(params, grads, first_moment, second_moment, hyper, ++t);
  }
};

}  // namespace lawa
