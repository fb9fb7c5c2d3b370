#pragma once

// AdamW, global-norm clipping and the warmup + cosine schedule.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "visatronic/error.hpp"
#include "visatronic/tensor.hpp"

namespace visatronic::tc {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <class T>
struct AdamWState {
  AdamWOptions options;
  std::int64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  void init_for(const std::vector<Tensor<T>>& params) {
    first_moment.clear();
    second_moment.clear();
    for (const auto& p : params) {
      first_moment.emplace_back(p.numel(), T(0));
      second_moment.emplace_back(p.numel(), T(0));
    }
    step = 0;
  }
};

// One decoupled-weight-decay Adam update using each parameter's grad buffer.
// Parameters with `decay[i] == false` skip weight decay.
template <class T>
void adamw_step(std::vector<Tensor<T>>& params, AdamWState<T>& state, double lr,
                const std::vector<bool>& decay = {}) {
  if (state.first_moment.size() != params.size()) state.init_for(params);
  const AdamWOptions& o = state.options;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& w = params[k].mutable_data();
    const auto& g = params[k].grad();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    require(m.size() == w.size() && v.size() == w.size(), ErrorKind::kShape, "adamw: moment shape mismatch");
    const bool use_decay = decay.empty() || decay[k];
    const T shrink = static_cast<T>(1.0 - lr * (use_decay ? o.weight_decay : 0.0));
    const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(o.eps);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      w[i] *= shrink;
      w[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
}

template <class T>
double global_grad_norm(const std::vector<Tensor<T>>& params) {
  double acc = 0.0;
  for (const auto& p : params) {
    for (T g : p.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(acc);
}

// Scales every grad by max_norm / norm when the global L2 norm exceeds
// max_norm. Returns the norm before clipping.
template <class T>
double clip_grad_norm(std::vector<Tensor<T>>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      for (T& g : p.mutable_grad()) g *= s;
    }
  }
  return norm;
}

// Linear warmup 0 -> base_lr, then cosine decay to 0 at total_steps.
inline double lr_schedule(std::int64_t step, double base_lr, std::int64_t warmup_steps, std::int64_t total_steps) {
  if (step <= 0) return 0.0;
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step >= total_steps) return 0.0;
  const double span = static_cast<double>(total_steps - warmup_steps);
  const double progress = span > 0.0 ? static_cast<double>(step - warmup_steps) / span : 1.0;
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace visatronic::tc
