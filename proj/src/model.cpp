#include "moelab/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moelab/error.hpp"

namespace moelab {

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model config: ") + name + " must be positive, got " + std::to_string(v));
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(vocab_size, "vocab_size");
  positive(seq_len, "seq_len");
  positive(n_experts, "n_experts");
  positive(top_k, "top_k");
  positive(expert_hidden, "expert_hidden");
  if (top_k > n_experts) {
    throw ConfigError("model config: top_k (" + std::to_string(top_k) + ") exceeds n_experts (" +
                      std::to_string(n_experts) + ")");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model (" + std::to_string(d_model) + ") not divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (!(aux_loss_weight >= 0.0) || !(z_loss_weight >= 0.0)) {
    throw ConfigError("model config: loss weights must be nonnegative");
  }
  if (!(init_std > 0.0) || !(norm_eps > 0.0)) throw ConfigError("model config: init_std and norm_eps must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"vocab_size", c.vocab_size},
                     {"seq_len", c.seq_len},
                     {"n_experts", c.n_experts},
                     {"top_k", c.top_k},
                     {"expert_hidden", c.expert_hidden},
                     {"aux_loss_weight", c.aux_loss_weight},
                     {"z_loss_weight", c.z_loss_weight},
                     {"renormalize_gates", c.renormalize_gates},
                     {"init_std", c.init_std},
                     {"norm_eps", c.norm_eps}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.seq_len = j.value("seq_len", d.seq_len);
  c.n_experts = j.value("n_experts", d.n_experts);
  c.top_k = j.value("top_k", d.top_k);
  c.expert_hidden = j.value("expert_hidden", d.expert_hidden);
  c.aux_loss_weight = j.value("aux_loss_weight", d.aux_loss_weight);
  c.z_loss_weight = j.value("z_loss_weight", d.z_loss_weight);
  c.renormalize_gates = j.value("renormalize_gates", d.renormalize_gates);
  c.init_std = j.value("init_std", d.init_std);
  c.norm_eps = j.value("norm_eps", d.norm_eps);
}

// ---------------------------------------------------------------------------
// ParameterSet

std::size_t ParameterSet::add(std::string name, Tensor value) {
  if (by_name_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  by_name_.emplace(name, tensors_.size());
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(value));
  return tensors_.size() - 1;
}

std::optional<std::size_t> ParameterSet::find(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) return std::nullopt;
  return it->second;
}

std::size_t ParameterSet::index(const std::string& name) const {
  auto i = find(name);
  if (!i) throw ConfigError("missing parameter '" + name + "'");
  return *i;
}

std::size_t ParameterSet::total_elements() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors_) n += t.size();
  return n;
}

namespace pname {
std::string token_embedding() { return "embed.tokens"; }
std::string position_embedding() { return "embed.positions"; }
std::string attn_norm(std::size_t layer) { return "layers." + std::to_string(layer) + ".attn_norm.gain"; }
std::string attn(std::size_t layer, const char* proj) { return "layers." + std::to_string(layer) + ".attn." + proj; }
std::string moe_norm(std::size_t layer) { return "layers." + std::to_string(layer) + ".moe_norm.gain"; }
std::string router(std::size_t layer) { return "layers." + std::to_string(layer) + ".moe.router"; }
std::string expert_prefix(std::size_t layer, std::size_t expert) {
  return "layers." + std::to_string(layer) + ".moe.experts." + std::to_string(expert) + ".";
}
std::string expert(std::size_t layer, std::size_t expert, const char* part) { return expert_prefix(layer, expert) + part; }
std::string final_norm() { return "final_norm.gain"; }
std::string head_weight() { return "lm_head.weight"; }
std::string head_bias() { return "lm_head.bias"; }
}  // namespace pname

Gradients make_gradients(const ParameterSet& params, const std::vector<bool>& trainable) {
  if (trainable.size() != params.size()) throw ConfigError("gradient mask does not cover every parameter");
  Gradients g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (trainable[i]) g[i] = Tensor(params.value(i).shape(), 0.0);
  }
  return g;
}

void zero_gradients(Gradients& grads) {
  for (Tensor& g : grads) g.fill(0.0);
}

// ---------------------------------------------------------------------------
// Routing

std::vector<int> topk_indices(const Tensor& probs, std::size_t k) {
  const std::size_t n = probs.rows(), e = probs.cols();
  if (k < 1 || k > e) throw ConfigError("top-k: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(e) + "]");
  std::vector<int> out(n * k);
  std::vector<int> order(e);
  for (std::size_t t = 0; t < n; ++t) {
    std::iota(order.begin(), order.end(), 0);
    const double* p = probs.data() + t * e;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), [p](int a, int b) {
      if (p[a] != p[b]) return p[a] > p[b];
      return a < b;
    });
    std::copy_n(order.begin(), k, out.begin() + static_cast<std::ptrdiff_t>(t * k));
  }
  return out;
}

RouterOutput route(const Tensor& hidden, const Tensor& router_weights, std::size_t k, bool renormalize) {
  Tape tape;
  Var h = tape.constant(hidden);
  Var w = tape.parameter(router_weights, nullptr);
  Var logits = matmul(h, w);
  if (k > logits.value().cols()) {
    throw ConfigError("route: k=" + std::to_string(k) + " exceeds expert count " + std::to_string(logits.value().cols()));
  }
  Var probs = softmax(logits);
  RouterOutput r;
  r.probs = probs.value();
  r.k = k;
  r.topk = topk_indices(r.probs, k);
  r.gates = select_gates(probs, r.topk, k, renormalize).value();
  return r;
}

Var expert_forward(Var x, const ExpertWeights& w) {
  Var a = matmul(x, w.w_gate);
  Var b = matmul(x, w.w_up);
  return matmul(mul(silu(a), b), w.w_down);
}

MoeOutput moe_forward(Var hidden, Var router_weight, std::span<const ExpertWeights> experts, std::size_t k,
                      bool renormalize) {
  const std::size_t n = hidden.value().rows();
  const std::size_t e = experts.size();
  if (k < 1 || k > e) throw ConfigError("moe_forward: k=" + std::to_string(k) + " must lie in [1, E=" + std::to_string(e) + "]");
  MoeOutput o;
  o.router_logits = matmul(hidden, router_weight);
  if (o.router_logits.value().cols() != e) throw ConfigError("moe_forward: router width does not match expert count");
  o.router_probs = softmax(o.router_logits);
  o.topk = topk_indices(o.router_probs.value(), k);
  Var gates = select_gates(o.router_probs, o.topk, k, renormalize);

  std::vector<std::vector<std::size_t>> rows(e), slots(e);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto ex = static_cast<std::size_t>(o.topk[t * k + j]);
      rows[ex].push_back(t);
      slots[ex].push_back(t * k + j);
    }
  }
  o.counts.resize(e);
  std::vector<Var> parts;
  std::vector<std::vector<std::size_t>> part_rows;
  for (std::size_t ex = 0; ex < e; ++ex) {
    o.counts[ex] = rows[ex].size();
    if (rows[ex].empty()) continue;
    Var x = gather_rows(hidden, rows[ex]);
    Var y = expert_forward(x, experts[ex]);
    Var g = gather_entries(gates, std::move(slots[ex]));
    parts.push_back(scale_rows(y, g));
    part_rows.push_back(std::move(rows[ex]));
  }
  o.out = scatter_add_rows(n, parts, std::move(part_rows));
  return o;
}

Var router_z_loss(Var router_logits) { return mean(square(logsumexp(router_logits))); }

double load_balance_loss(const MoeLayerTrace& trace) {
  const std::size_t e = trace.probs.cols();
  std::vector<std::size_t> counts(e, 0);
  for (int id : trace.topk) counts[static_cast<std::size_t>(id)] += 1;
  Tape tape;
  return load_balance(tape.constant(trace.probs), counts, trace.k).value().item();
}

// ---------------------------------------------------------------------------
// MoeLm

ParameterSet MoeLm::initial_parameters(const ModelConfig& c, Rng rng) {
  c.validate();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  const auto h = static_cast<std::size_t>(c.expert_hidden);
  const auto e = static_cast<std::size_t>(c.n_experts);
  const double out_std = c.init_std / std::sqrt(2.0 * c.n_layers);

  ParameterSet ps;
  auto normal = [&](const std::string& name, Shape shape, double std) {
    Tensor t(std::move(shape));
    Rng r = rng.split(name);
    for (double& x : t.values()) x = std * r.normal();
    ps.add(name, std::move(t));
  };
  auto constant = [&](const std::string& name, Shape shape, double value) { ps.add(name, Tensor(std::move(shape), value)); };

  normal(pname::token_embedding(), {v, d}, c.init_std);
  normal(pname::position_embedding(), {static_cast<std::size_t>(c.seq_len), d}, c.init_std);
  for (std::size_t l = 0; l < static_cast<std::size_t>(c.n_layers); ++l) {
    constant(pname::attn_norm(l), {d}, 1.0);
    normal(pname::attn(l, "wq"), {d, d}, c.init_std);
    normal(pname::attn(l, "wk"), {d, d}, c.init_std);
    normal(pname::attn(l, "wv"), {d, d}, c.init_std);
    normal(pname::attn(l, "wo"), {d, d}, out_std);
    constant(pname::moe_norm(l), {d}, 1.0);
    normal(pname::router(l), {d, e}, c.init_std);
    for (std::size_t x = 0; x < e; ++x) {
      normal(pname::expert(l, x, "w_gate"), {d, h}, c.init_std);
      normal(pname::expert(l, x, "w_up"), {d, h}, c.init_std);
      normal(pname::expert(l, x, "w_down"), {h, d}, out_std);
    }
  }
  constant(pname::final_norm(), {d}, 1.0);
  normal(pname::head_weight(), {d, v}, c.init_std);
  constant(pname::head_bias(), {v}, 0.0);
  return ps;
}

MoeLm MoeLm::initialize(const ModelConfig& config, Rng rng) {
  return MoeLm(config, initial_parameters(config, rng));
}

MoeLm::MoeLm(ModelConfig config, ParameterSet params) : config_(config), params_(std::move(params)) {
  config_.validate();
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto v = static_cast<std::size_t>(config_.vocab_size);
  const auto h = static_cast<std::size_t>(config_.expert_hidden);
  const auto e = static_cast<std::size_t>(config_.n_experts);
  auto bind = [&](const std::string& name, const Shape& shape) {
    const std::size_t i = params_.index(name);
    if (params_.value(i).shape() != shape) {
      throw ConfigError("parameter '" + name + "' has shape " + shape_string(params_.value(i).shape()) + ", expected " +
                        shape_string(shape));
    }
    return i;
  };
  tok_emb_ = bind(pname::token_embedding(), {v, d});
  pos_emb_ = bind(pname::position_embedding(), {static_cast<std::size_t>(config_.seq_len), d});
  for (std::size_t l = 0; l < static_cast<std::size_t>(config_.n_layers); ++l) {
    LayerIds ids{};
    ids.attn_norm = bind(pname::attn_norm(l), {d});
    ids.wq = bind(pname::attn(l, "wq"), {d, d});
    ids.wk = bind(pname::attn(l, "wk"), {d, d});
    ids.wv = bind(pname::attn(l, "wv"), {d, d});
    ids.wo = bind(pname::attn(l, "wo"), {d, d});
    ids.moe_norm = bind(pname::moe_norm(l), {d});
    ids.router = bind(pname::router(l), {d, e});
    for (std::size_t x = 0; x < e; ++x) {
      ids.w_gate.push_back(bind(pname::expert(l, x, "w_gate"), {d, h}));
      ids.w_up.push_back(bind(pname::expert(l, x, "w_up"), {d, h}));
      ids.w_down.push_back(bind(pname::expert(l, x, "w_down"), {h, d}));
    }
    layers_.push_back(std::move(ids));
  }
  final_norm_ = bind(pname::final_norm(), {d});
  head_w_ = bind(pname::head_weight(), {d, v});
  head_b_ = bind(pname::head_bias(), {v});
  const std::size_t bound = 2 + layers_.size() * (7 + 3 * e) + 3;
  if (params_.size() != bound) {
    throw ConfigError("checkpoint holds " + std::to_string(params_.size()) + " tensors; the config expects " +
                      std::to_string(bound));
  }
}

void MoeLm::check_inputs(std::span<const std::vector<int>> seqs, std::size_t min_len) const {
  if (seqs.empty()) throw InputError("empty batch");
  for (const auto& s : seqs) {
    if (s.size() < min_len) throw InputError("sequence shorter than " + std::to_string(min_len) + " tokens");
    if (s.size() > static_cast<std::size_t>(config_.seq_len)) {
      throw InputError("sequence of length " + std::to_string(s.size()) + " exceeds seq_len " +
                       std::to_string(config_.seq_len));
    }
    for (int t : s) {
      if (t < 0 || t >= config_.vocab_size) {
        throw InputError("token id " + std::to_string(t) + " outside vocabulary [0," + std::to_string(config_.vocab_size) + ")");
      }
    }
  }
}

MoeLm::Forward MoeLm::forward(Tape& tape, std::span<const std::vector<int>> inputs, Gradients* grads) const {
  check_inputs(inputs, 1);
  auto p = [&](std::size_t i) {
    Tensor* sink = (grads != nullptr && !(*grads)[i].empty()) ? &(*grads)[i] : nullptr;
    return tape.parameter(params_.value(i), sink);
  };

  Forward f;
  std::vector<std::size_t> tokens, positions;
  f.offsets.push_back(0);
  for (const auto& s : inputs) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      tokens.push_back(static_cast<std::size_t>(s[i]));
      positions.push_back(i);
    }
    f.offsets.push_back(tokens.size());
  }
  const std::size_t n = tokens.size();
  const auto k = static_cast<std::size_t>(config_.top_k);
  const double eps = config_.norm_eps;

  Var h = add(gather_rows(p(tok_emb_), std::move(tokens)), gather_rows(p(pos_emb_), std::move(positions)));
  for (const LayerIds& ids : layers_) {
    Var x = rmsnorm(h, p(ids.attn_norm), eps);
    Var q = matmul(x, p(ids.wq));
    Var kk = matmul(x, p(ids.wk));
    Var v = matmul(x, p(ids.wv));
    Var a = causal_attention(q, kk, v, static_cast<std::size_t>(config_.n_heads), f.offsets);
    h = add(h, matmul(a, p(ids.wo)));

    Var xm = rmsnorm(h, p(ids.moe_norm), eps);
    std::vector<ExpertWeights> experts;
    experts.reserve(ids.w_gate.size());
    for (std::size_t e = 0; e < ids.w_gate.size(); ++e) {
      experts.push_back({p(ids.w_gate[e]), p(ids.w_up[e]), p(ids.w_down[e])});
    }
    MoeOutput m = moe_forward(xm, p(ids.router), experts, k, config_.renormalize_gates);
    h = add(h, m.out);
    f.moe.push_back(std::move(m));
  }
  (void)n;
  f.logits = affine(rmsnorm(h, p(final_norm_), eps), p(head_w_), p(head_b_));
  return f;
}

LossResult MoeLm::loss(std::span<const std::vector<int>> sequences, Gradients* grads, bool keep_traces) const {
  check_inputs(sequences, 2);
  std::vector<std::vector<int>> inputs;
  std::vector<int> targets;
  inputs.reserve(sequences.size());
  for (const auto& s : sequences) {
    inputs.emplace_back(s.begin(), s.end() - 1);
    targets.insert(targets.end(), s.begin() + 1, s.end());
  }
  Tape tape;
  Forward f = forward(tape, inputs, grads);
  Var ce = cross_entropy(f.logits, targets);

  std::vector<Var> aux, z;
  for (const MoeOutput& m : f.moe) {
    aux.push_back(load_balance(m.router_probs, m.counts, static_cast<std::size_t>(config_.top_k)));
    z.push_back(router_z_loss(m.router_logits));
  }
  const std::vector<double> layer_mean(f.moe.size(), 1.0 / static_cast<double>(f.moe.size()));
  Var aux_mean = weighted_sum(aux, layer_mean);
  Var z_mean = weighted_sum(z, layer_mean);

  std::vector<Var> terms{ce};
  std::vector<double> weights{1.0};
  if (config_.aux_loss_weight != 0.0) {
    terms.push_back(aux_mean);
    weights.push_back(config_.aux_loss_weight);
  }
  if (config_.z_loss_weight != 0.0) {
    terms.push_back(z_mean);
    weights.push_back(config_.z_loss_weight);
  }
  Var total = terms.size() == 1 ? ce : weighted_sum(terms, weights);

  LossResult r;
  r.loss.total = total.value().item();
  r.loss.ce = ce.value().item();
  r.loss.aux = aux_mean.value().item();
  r.loss.z = z_mean.value().item();
  r.loss.tokens = targets.size();
  r.offsets = f.offsets;
  if (!std::isfinite(r.loss.total)) throw NumericalError("lm_loss: non-finite loss");
  if (keep_traces) {
    for (std::size_t l = 0; l < f.moe.size(); ++l) {
      r.traces.push_back({l, f.moe[l].router_probs.value(), f.moe[l].topk, static_cast<std::size_t>(config_.top_k)});
    }
  }
  if (grads != nullptr) tape.backward(total);
  return r;
}

std::vector<std::vector<double>> MoeLm::token_nlls(std::span<const std::vector<int>> sequences) const {
  check_inputs(sequences, 2);
  std::vector<std::vector<int>> inputs;
  std::vector<int> targets;
  for (const auto& s : sequences) {
    inputs.emplace_back(s.begin(), s.end() - 1);
    targets.insert(targets.end(), s.begin() + 1, s.end());
  }
  Tape tape;
  Forward f = forward(tape, inputs, nullptr);
  std::vector<double> flat = token_nll(f.logits.value(), targets);
  std::vector<std::vector<double>> out;
  for (std::size_t s = 0; s + 1 < f.offsets.size(); ++s) {
    out.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(f.offsets[s]),
                     flat.begin() + static_cast<std::ptrdiff_t>(f.offsets[s + 1]));
  }
  return out;
}

std::vector<MoeLayerTrace> MoeLm::routing(std::span<const std::vector<int>> inputs,
                                          std::vector<std::size_t>* offsets) const {
  Tape tape;
  Forward f = forward(tape, inputs, nullptr);
  std::vector<MoeLayerTrace> traces;
  for (std::size_t l = 0; l < f.moe.size(); ++l) {
    traces.push_back({l, f.moe[l].router_probs.value(), f.moe[l].topk, static_cast<std::size_t>(config_.top_k)});
  }
  if (offsets != nullptr) *offsets = f.offsets;
  return traces;
}

std::size_t MoeLm::expert_param_count() const {
  return 3 * static_cast<std::size_t>(config_.d_model) * static_cast<std::size_t>(config_.expert_hidden);
}

std::size_t MoeLm::router_param_count() const {
  return static_cast<std::size_t>(config_.d_model) * static_cast<std::size_t>(config_.n_experts);
}

}  // namespace moelab
