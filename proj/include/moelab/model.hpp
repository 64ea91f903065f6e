#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/autograd.hpp"
#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int vocab_size = 512;
  int seq_len = 128;
  int n_experts = 16;
  int top_k = 2;
  int expert_hidden = 64;
  double aux_loss_weight = 0.01;
  double z_loss_weight = 0.001;
  /// Off: gates are the raw softmax probabilities of the selected experts.
  bool renormalize_gates = false;
  double init_std = 0.02;
  double norm_eps = 1e-6;

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// ---------------------------------------------------------------------------
// Parameters

/// Ordered, uniquely named parameter tensors.
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor value);

  [[nodiscard]] std::size_t size() const { return tensors_.size(); }
  [[nodiscard]] Tensor& value(std::size_t i) { return tensors_[i]; }
  [[nodiscard]] const Tensor& value(std::size_t i) const { return tensors_[i]; }
  [[nodiscard]] const std::string& name(std::size_t i) const { return names_[i]; }
  [[nodiscard]] std::optional<std::size_t> find(const std::string& name) const;
  /// Throws ConfigError if absent.
  [[nodiscard]] std::size_t index(const std::string& name) const;
  [[nodiscard]] std::size_t total_elements() const;

  [[nodiscard]] std::span<Tensor> tensors() { return tensors_; }
  [[nodiscard]] std::span<const Tensor> tensors() const { return tensors_; }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    return a.names_ == b.names_ && a.tensors_ == b.tensors_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t> by_name_;
};

/// Canonical parameter names.
namespace pname {
std::string token_embedding();
std::string position_embedding();
std::string attn_norm(std::size_t layer);
std::string attn(std::size_t layer, const char* proj);  // "wq", "wk", "wv", "wo"
std::string moe_norm(std::size_t layer);
std::string router(std::size_t layer);
std::string expert(std::size_t layer, std::size_t expert, const char* part);  // "w_gate", "w_up", "w_down"
std::string expert_prefix(std::size_t layer, std::size_t expert);
std::string final_norm();
std::string head_weight();
std::string head_bias();
}  // namespace pname

/// Gradient buffers aligned with a ParameterSet. An empty tensor marks a
/// frozen parameter: it is recorded without a sink and receives nothing.
using Gradients = std::vector<Tensor>;

Gradients make_gradients(const ParameterSet& params, const std::vector<bool>& trainable);
void zero_gradients(Gradients& grads);

// ---------------------------------------------------------------------------
// Routing

struct RouterOutput {
  Tensor probs;           // [T, E]
  std::vector<int> topk;  // [T * k], each row in descending probability
  std::size_t k = 0;
  Tensor gates;  // [T, k]
};

/// Selects the k largest entries of each row, ties broken by lowest index.
std::vector<int> topk_indices(const Tensor& probs, std::size_t k);

/// probs = softmax(hidden * router_weights); top-k selection; gate weights.
RouterOutput route(const Tensor& hidden, const Tensor& router_weights, std::size_t k, bool renormalize = false);

struct ExpertWeights {
  Var w_gate;  // [d, h]
  Var w_up;    // [d, h]
  Var w_down;  // [h, d]
};

/// SwiGLU expert: (silu(x Wg) * (x Wu)) Wd.
Var expert_forward(Var x, const ExpertWeights& w);

struct MoeOutput {
  Var out;
  Var router_logits;
  Var router_probs;
  std::vector<int> topk;
  std::vector<std::size_t> counts;  // (token, slot) assignments per expert
};

/// Dropless sparse MoE: out[t] = sum over the k selected experts of
/// gate(t, e) * expert_e(hidden[t]). Every token is processed by exactly k experts.
MoeOutput moe_forward(Var hidden, Var router_weight, std::span<const ExpertWeights> experts, std::size_t k,
                      bool renormalize);

/// Router z-loss: mean over tokens of logsumexp(logits)^2.
Var router_z_loss(Var router_logits);

struct MoeLayerTrace {
  std::size_t layer = 0;
  Tensor probs;           // [N, E]
  std::vector<int> topk;  // [N * k]
  std::size_t k = 0;
  [[nodiscard]] std::size_t token_count() const { return probs.rows(); }
};

/// Switch-style load-balancing loss over recorded traces (values only).
double load_balance_loss(const MoeLayerTrace& trace);

// ---------------------------------------------------------------------------
// Model

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double aux = 0.0;  // mean over MoE layers
  double z = 0.0;    // mean over MoE layers
  std::size_t tokens = 0;
};

struct LossResult {
  LossBreakdown loss;
  std::vector<MoeLayerTrace> traces;
  std::vector<std::size_t> offsets;  // packed-row boundaries of the input sequences
};

class MoeLm {
 public:
  MoeLm(ModelConfig config, ParameterSet params);
  static MoeLm initialize(const ModelConfig& config, Rng rng);
  static ParameterSet initial_parameters(const ModelConfig& config, Rng rng);

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const ParameterSet& params() const { return params_; }
  [[nodiscard]] ParameterSet& params() { return params_; }

  struct Forward {
    Var logits;  // [N, V]
    std::vector<MoeOutput> moe;
    std::vector<std::size_t> offsets;
  };

  /// Records the forward pass of packed `inputs` on `tape`. Parameters with a
  /// non-empty entry in `grads` are differentiable.
  Forward forward(Tape& tape, std::span<const std::vector<int>> inputs, Gradients* grads) const;

  /// Next-token loss over `sequences` (each of length 2..seq_len): inputs are
  /// seq[0..L-2], targets seq[1..L-1]. If `grads` is non-null, runs backward
  /// and accumulates into it.
  LossResult loss(std::span<const std::vector<int>> sequences, Gradients* grads = nullptr,
                  bool keep_traces = false) const;

  /// Per-target NLLs for each sequence, no auxiliary terms.
  std::vector<std::vector<double>> token_nlls(std::span<const std::vector<int>> sequences) const;

  /// Routing traces for `inputs` fed as-is (every position routed).
  std::vector<MoeLayerTrace> routing(std::span<const std::vector<int>> inputs, std::vector<std::size_t>* offsets) const;

  [[nodiscard]] std::size_t expert_param_count() const;
  [[nodiscard]] std::size_t router_param_count() const;

 private:
  void check_inputs(std::span<const std::vector<int>> seqs, std::size_t min_len) const;

  ModelConfig config_;
  ParameterSet params_;

  struct LayerIds {
    std::size_t attn_norm, wq, wk, wv, wo, moe_norm, router;
    std::vector<std::size_t> w_gate, w_up, w_down;
  };
  std::size_t tok_emb_ = 0, pos_emb_ = 0, final_norm_ = 0, head_w_ = 0, head_b_ = 0;
  std::vector<LayerIds> layers_;
};

}  // namespace moelab
