#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

/// Moment accumulators aligned with a parameter list. An empty moment tensor
/// marks a parameter the optimizer never touches.
struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  /// Fresh state with moments allocated where `active[i]` is true.
  static OptimizerState create(const AdamWConfig& config, std::span<const Tensor> params,
                               const std::vector<bool>& active);
};

/// One decoupled-weight-decay Adam update with bias correction:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
/// Parameters whose gradient tensor is empty are skipped. Throws
/// NumericalError if any gradient is non-finite; nothing is modified then.
void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state);

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(std::span<Tensor> grads, double max_norm);

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Compares analytic gradients against central differences
/// (f(p + h) - f(p - h)) / 2h for every entry of every tensor.
///
/// Relative error is |a - n| / max(|a|, |n|, floor). The floor keeps entries
/// whose true gradient is ~0 from dividing roundoff by roundoff.
GradCheckResult finite_difference_check(const std::function<double()>& loss, std::span<Tensor* const> params,
                                        std::span<const Tensor> analytic, double h, double floor = 1e-6);

}  // namespace moelab
