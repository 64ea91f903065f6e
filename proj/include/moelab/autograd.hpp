#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "moelab/tensor.hpp"

namespace moelab {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  [[nodiscard]] const Tensor& value() const;
  /// Accumulated gradient; empty if nothing flowed into this node.
  [[nodiscard]] const Tensor& grad() const;
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] std::size_t id() const { return id_; }
  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// valid topological order, so backward is a single reverse sweep.
///
/// Parameters are recorded by reference: the tape reads the caller's tensor
/// and accumulates gradients into a caller-provided sink. A parameter with no
/// sink is frozen; nothing upstream of frozen leaves is differentiated.
class Tape {
 public:
  /// Called with the tape and the id of the node being differentiated.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  /// `value` must outlive the tape. `grad_sink`, if non-null, must already
  /// have the parameter's shape; gradients are added to it.
  Var parameter(const Tensor& value, Tensor* grad_sink);

  /// Seeds d(root)/d(root) = 1 and propagates. Root must hold one element.
  void backward(Var root);

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  // Op-implementer interface.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> parents, BackwardFn fn);
  [[nodiscard]] const Tensor& value(std::size_t id) const { return *nodes_[id].value; }
  /// Gradient buffer for `id`, zero-allocated on first use.
  Tensor& grad(std::size_t id);
  [[nodiscard]] bool has_grad(std::size_t id) const { return nodes_[id].grad != nullptr; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Tensor owned_value;
    const Tensor* value = nullptr;
    Tensor owned_grad;
    Tensor* grad = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Shape violations throw ConfigError; non-finite
// inputs to the softmax family throw NumericalError.

/// out = x W + b, with x [B, Din], W [Din, Dout], b [Dout].
Var affine(Var x, Var w, Var b);
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var square(Var a);
Var silu(Var a);
/// Mean of all elements, as a scalar.
Var mean(Var a);
Var sum(Var a);
/// Scalar linear combination sum_i w_i * s_i of scalar inputs.
Var weighted_sum(std::span<const Var> scalars, std::span<const double> weights);

/// Softmax over the trailing axis.
Var softmax(Var logits);
/// Log-sum-exp over the trailing axis; drops that axis.
Var logsumexp(Var logits);
/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
Var cross_entropy(Var logits, std::span<const int> targets);

/// y = x / sqrt(mean(x^2) + eps) * gain, row-wise.
Var rmsnorm(Var x, Var gain, double eps);

/// out[i] = x[index[i]] (row gather). Also serves as embedding lookup.
Var gather_rows(Var x, std::vector<std::size_t> index);
/// out = sum_p scatter(parts[p] -> rows index[p]) into an [n_rows, cols] zero matrix.
Var scatter_add_rows(std::size_t n_rows, std::span<const Var> parts,
                     std::vector<std::vector<std::size_t>> index);
/// out[i, 0] = x.flat[flat_index[i]].
Var gather_entries(Var x, std::vector<std::size_t> flat_index);
/// out[i, :] = y[i, :] * g[i, 0].
Var scale_rows(Var y, Var g);

/// Gate weights for the selected experts: out[t, j] = probs[t, topk[t*k + j]],
/// optionally renormalized over the k selected entries.
Var select_gates(Var probs, std::span<const int> topk, std::size_t k, bool renormalize);

/// Switch-style balance loss E * sum_e f_e * mean_t(probs[t, e]) where
/// f_e = counts[e] / (T * k). counts are constants (top-k is not differentiated).
Var load_balance(Var probs, std::span<const std::size_t> counts, std::size_t k);

/// Multi-head causal self-attention over packed sequences. q, k, v are
/// [N, d]; `offsets` (size S+1) delimits S sequences along the rows.
Var causal_attention(Var q, Var k, Var v, std::size_t n_heads, std::span<const std::size_t> offsets);

// ---------------------------------------------------------------------------
// Plain (non-recorded) kernels shared with evaluation code.

Tensor softmax_rows(const Tensor& logits);
Tensor logsumexp_rows(const Tensor& logits);
/// Per-position negative log-likelihoods.
std::vector<double> token_nll(const Tensor& logits, std::span<const int> targets);

}  // namespace moelab
