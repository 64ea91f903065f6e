#include "moelab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "moelab/error.hpp"

namespace moelab {

OptimizerState OptimizerState::create(const AdamWConfig& config, std::span<const Tensor> params,
                                      const std::vector<bool>& active) {
  if (active.size() != params.size()) throw ConfigError("optimizer: activity mask does not match parameter count");
  OptimizerState s;
  s.config = config;
  s.m.resize(params.size());
  s.v.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!active[i]) continue;
    s.m[i] = Tensor(params[i].shape(), 0.0);
    s.v[i] = Tensor(params[i].shape(), 0.0);
  }
  return s;
}

void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ConfigError("adamw_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].empty()) continue;
    if (grads[i].shape() != params[i].shape() || state.m[i].shape() != params[i].shape()) {
      throw ConfigError("adamw_step: shape mismatch for parameter " + std::to_string(i));
    }
    if (!grads[i].all_finite()) {
      throw NumericalError("adamw_step: non-finite gradient in parameter " + std::to_string(i));
    }
  }

  const AdamWConfig& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].empty()) continue;
    double* p = params[i].data();
    const double* g = grads[i].data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= c.lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * p[j]);
    }
  }
}

double clip_grad_norm(std::span<Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.values()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& g : grads) {
      for (double& v : g.values()) v *= s;
    }
  }
  return norm;
}

GradCheckResult finite_difference_check(const std::function<double()>& loss, std::span<Tensor* const> params,
                                        std::span<const Tensor> analytic, double h, double floor) {
  if (params.size() != analytic.size()) throw ConfigError("finite_difference_check: gradient count mismatch");
  GradCheckResult r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (analytic[i].shape() != p.shape()) throw ConfigError("finite_difference_check: gradient shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double orig = p[j];
      p[j] = orig + h;
      const double fp = loss();
      p[j] = orig - h;
      const double fm = loss();
      p[j] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i][j];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      if (rel > r.max_rel_error || r.checked == 0) {
        r.max_rel_error = std::max(r.max_rel_error, rel);
        r.worst_tensor = i;
        r.worst_index = j;
      }
      ++r.checked;
    }
  }
  return r;
}

}  // namespace moelab
