#include "moelab/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "moelab/error.hpp"

namespace moelab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

Eigen::Index idx(std::size_t n) { return static_cast<Eigen::Index>(n); }

ConstMatMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.data(), idx(rows), idx(cols));
}

MatMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols) { return MatMap(t.data(), idx(rows), idx(cols)); }

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void require_rank2(const Tensor& t, const char* op, const char* arg) {
  require(t.rank() == 2, std::string(op) + ": " + arg + " must be rank 2, got " + shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

Tape* same_tape(std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    require(v.valid(), "operation on an empty Var");
    if (t == nullptr) t = v.tape();
    require(v.tape() == t, "operands recorded on different tapes");
  }
  return t;
}

std::size_t trailing(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericalError(std::string(op) + ": non-finite input");
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape_->value(id_); }

const Tensor& Var::grad() const {
  static const Tensor kEmpty;
  return tape_->has_grad(id_) ? tape_->grad(id_) : kEmpty;
}

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  Node& n = nodes_.back();
  if (n.value == nullptr) n.value = &n.owned_value;
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned_value = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.owned_value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(const Tensor& value, Tensor* grad_sink) {
  Node n;
  n.value = &value;
  if (grad_sink != nullptr) {
    require(grad_sink->shape() == value.shape(), "parameter gradient sink has shape " +
                                                     shape_string(grad_sink->shape()) + ", expected " +
                                                     shape_string(value.shape()));
    n.grad = grad_sink;
    n.requires_grad = true;
  }
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn fn) {
  Node n;
  n.owned_value = std::move(value);
  n.requires_grad = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad == nullptr) {
    n.owned_grad = Tensor(n.value->shape(), 0.0);
    n.grad = &n.owned_grad;
  }
  return *n.grad;
}

void Tape::backward(Var root) {
  require(root.tape() == this, "backward: root is not on this tape");
  require(value(root.id()).size() == 1, "backward: root must be a scalar");
  if (!nodes_[root.id()].requires_grad) return;
  grad(root.id())[0] += 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    // Leaves have no backward; interior nodes run only if something reached them.
    if (n.backward && n.grad != nullptr) n.backward(*this, i);
  }
}

// ---------------------------------------------------------------------------
// Plain kernels

Tensor softmax_rows(const Tensor& logits) {
  check_finite(logits, "softmax");
  Tensor out(logits.shape());
  const std::size_t inner = trailing(logits);
  const std::size_t outer = inner ? logits.size() / inner : 0;
  for (std::size_t r = 0; r < outer; ++r) {
    const double* x = logits.data() + r * inner;
    double* y = out.data() + r * inner;
    const double mx = *std::max_element(x, x + inner);
    double s = 0.0;
    for (std::size_t j = 0; j < inner; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (std::size_t j = 0; j < inner; ++j) y[j] /= s;
  }
  return out;
}

Tensor logsumexp_rows(const Tensor& logits) {
  check_finite(logits, "logsumexp");
  Shape shape = logits.shape();
  if (!shape.empty()) shape.pop_back();
  Tensor out(shape);
  const std::size_t inner = trailing(logits);
  const std::size_t outer = inner ? logits.size() / inner : 0;
  for (std::size_t r = 0; r < outer; ++r) {
    const double* x = logits.data() + r * inner;
    const double mx = *std::max_element(x, x + inner);
    double s = 0.0;
    for (std::size_t j = 0; j < inner; ++j) s += std::exp(x[j] - mx);
    out[r] = mx + std::log(s);
  }
  return out;
}

std::vector<double> token_nll(const Tensor& logits, std::span<const int> targets) {
  require_rank2(logits, "cross_entropy", "logits");
  const std::size_t t_count = logits.rows();
  const std::size_t v = logits.cols();
  require(targets.size() == t_count, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                         std::to_string(t_count) + " rows");
  for (int y : targets) {
    if (y < 0 || static_cast<std::size_t>(y) >= v) {
      throw InputError("cross_entropy: target " + std::to_string(y) + " outside [0," + std::to_string(v) + ")");
    }
  }
  Tensor lse = logsumexp_rows(logits);
  std::vector<double> nll(t_count);
  for (std::size_t t = 0; t < t_count; ++t) nll[t] = lse[t] - logits.at(t, static_cast<std::size_t>(targets[t]));
  return nll;
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  Tape* tape = same_tape({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul", "a");
  require_rank2(bv, "matmul", "b");
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  require(bv.rows() == k,
          "matmul: inner dimensions differ " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  Tensor out(Shape{n, m});
  as_matrix(out, n, m).noalias() = as_matrix(av, n, k) * as_matrix(bv, k, m);
  const std::size_t ai = a.id(), bi = b.id();
  return tape->record(std::move(out), {a, b}, [ai, bi, n, k, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) {
      as_matrix(t.grad(ai), n, k).noalias() += as_matrix(g, n, m) * as_matrix(t.value(bi), k, m).transpose();
    }
    if (t.requires_grad(bi)) {
      as_matrix(t.grad(bi), k, m).noalias() += as_matrix(t.value(ai), n, k).transpose() * as_matrix(g, n, m);
    }
  });
}

Var affine(Var x, Var w, Var b) {
  Tape* tape = same_tape({x, w, b});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_rank2(xv, "affine", "x");
  require_rank2(wv, "affine", "W");
  const std::size_t n = xv.rows(), din = xv.cols(), dout = wv.cols();
  require(wv.rows() == din, "affine: x is " + shape_string(xv.shape()) + " but W is " + shape_string(wv.shape()));
  require(bv.rank() == 1 && bv.size() == dout,
          "affine: bias must have shape [" + std::to_string(dout) + "], got " + shape_string(bv.shape()));
  Tensor out(Shape{n, dout});
  auto o = as_matrix(out, n, dout);
  o.noalias() = as_matrix(xv, n, din) * as_matrix(wv, din, dout);
  o.rowwise() += as_matrix(bv, 1, dout).row(0);
  const std::size_t xi = x.id(), wi = w.id(), bi = b.id();
  return tape->record(std::move(out), {x, w, b}, [xi, wi, bi, n, din, dout](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    auto gm = as_matrix(g, n, dout);
    if (t.requires_grad(xi)) {
      as_matrix(t.grad(xi), n, din).noalias() += gm * as_matrix(t.value(wi), din, dout).transpose();
    }
    if (t.requires_grad(wi)) {
      as_matrix(t.grad(wi), din, dout).noalias() += as_matrix(t.value(xi), n, din).transpose() * gm;
    }
    if (t.requires_grad(bi)) as_matrix(t.grad(bi), 1, dout) += gm.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  Tape* tape = same_tape({a, b});
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.add_(b.value());
  const std::size_t ai = a.id(), bi = b.id();
  return tape->record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) t.grad(ai).add_(g);
    if (t.requires_grad(bi)) t.grad(bi).add_(g);
  });
}

Var mul(Var a, Var b) {
  Tape* tape = same_tape({a, b});
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape->record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad(ai);
      const Tensor& bv = t.value(bi);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(bi)) {
      Tensor& gb = t.grad(bi);
      const Tensor& av = t.value(ai);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tape* tape = same_tape({a});
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  const std::size_t ai = a.id();
  return tape->record(std::move(out), {a}, [ai, s](Tape& t, std::size_t self) { t.grad(ai).add_(t.grad(self), s); });
}

Var square(Var a) {
  Tape* tape = same_tape({a});
  Tensor out = a.value();
  for (double& v : out.values()) v *= v;
  const std::size_t ai = a.id();
  return tape->record(std::move(out), {a}, [ai](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ai);
    Tensor& ga = t.grad(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * av[i] * g[i];
  });
}

Var silu(Var a) {
  Tape* tape = same_tape({a});
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * sigmoid(av[i]);
  const std::size_t ai = a.id();
  return tape->record(std::move(out), {a}, [ai](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ai);
    Tensor& ga = t.grad(ai);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = sigmoid(av[i]);
      ga[i] += g[i] * s * (1.0 + av[i] * (1.0 - s));
    }
  });
}

Var sum(Var a) {
  Tape* tape = same_tape({a});
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ai = a.id();
  return tape->record(Tensor::scalar(s), {a}, [ai](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad(ai).values()) v += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw InputError("mean of an empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var weighted_sum(std::span<const Var> scalars, std::span<const double> weights) {
  require(scalars.size() == weights.size() && !scalars.empty(), "weighted_sum: need one weight per scalar");
  Tape* tape = scalars[0].tape();
  double s = 0.0;
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    require(scalars[i].tape() == tape, "weighted_sum: operands on different tapes");
    require(scalars[i].value().size() == 1, "weighted_sum: operands must be scalars");
    s += weights[i] * scalars[i].value()[0];
    ids.push_back(scalars[i].id());
  }
  std::vector<double> w(weights.begin(), weights.end());
  return tape->record(Tensor::scalar(s), scalars, [ids, w](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) t.grad(ids[i])[0] += w[i] * g;
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax family

Var softmax(Var logits) {
  Tape* tape = same_tape({logits});
  Tensor out = softmax_rows(logits.value());
  const std::size_t li = logits.id();
  return tape->record(std::move(out), {logits}, [li](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(li);
    const std::size_t inner = trailing(y);
    const std::size_t outer = inner ? y.size() / inner : 0;
    for (std::size_t r = 0; r < outer; ++r) {
      const std::size_t base = r * inner;
      double dot = 0.0;
      for (std::size_t j = 0; j < inner; ++j) dot += g[base + j] * y[base + j];
      for (std::size_t j = 0; j < inner; ++j) gx[base + j] += y[base + j] * (g[base + j] - dot);
    }
  });
}

Var logsumexp(Var logits) {
  Tape* tape = same_tape({logits});
  Tensor out = logsumexp_rows(logits.value());
  const std::size_t li = logits.id();
  return tape->record(std::move(out), {logits}, [li](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(li);
    const Tensor p = softmax_rows(x);
    Tensor& gx = t.grad(li);
    const std::size_t inner = trailing(x);
    const std::size_t outer = inner ? x.size() / inner : 0;
    for (std::size_t r = 0; r < outer; ++r) {
      for (std::size_t j = 0; j < inner; ++j) gx[r * inner + j] += g[r] * p[r * inner + j];
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  Tape* tape = same_tape({logits});
  std::vector<double> nll = token_nll(logits.value(), targets);
  if (nll.empty()) throw InputError("cross_entropy: no positions");
  double s = 0.0;
  for (double v : nll) s += v;
  const double inv_t = 1.0 / static_cast<double>(nll.size());
  std::vector<int> tg(targets.begin(), targets.end());
  const std::size_t li = logits.id();
  return tape->record(Tensor::scalar(s * inv_t), {logits}, [li, tg = std::move(tg), inv_t](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0] * inv_t;
    Tensor p = softmax_rows(t.value(li));
    const std::size_t v = p.cols();
    Tensor& gx = t.grad(li);
    for (std::size_t r = 0; r < tg.size(); ++r) {
      p[r * v + static_cast<std::size_t>(tg[r])] -= 1.0;
    }
    gx.add_(p, g);
  });
}

// ---------------------------------------------------------------------------
// Normalization

Var rmsnorm(Var x, Var gain, double eps) {
  Tape* tape = same_tape({x, gain});
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  require_rank2(xv, "rmsnorm", "x");
  const std::size_t n = xv.rows(), d = xv.cols();
  require(gv.size() == d, "rmsnorm: gain has " + std::to_string(gv.size()) + " entries for width " + std::to_string(d));
  auto inv_rms = std::make_shared<std::vector<double>>(n);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = xv.data() + r * d;
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
    ms /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(ms + eps);
    (*inv_rms)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] * inv * gv[j];
  }
  const std::size_t xi = x.id(), gi = gain.id();
  return tape->record(std::move(out), {x, gain}, [xi, gi, n, d, inv_rms](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    const Tensor& xv = t.value(xi);
    const Tensor& gv = t.value(gi);
    const bool need_x = t.requires_grad(xi), need_g = t.requires_grad(gi);
    Tensor* gx = need_x ? &t.grad(xi) : nullptr;
    Tensor* gg = need_g ? &t.grad(gi) : nullptr;
    for (std::size_t r = 0; r < n; ++r) {
      const double inv = (*inv_rms)[r];
      const double* xr = xv.data() + r * d;
      const double* gyr = gy.data() + r * d;
      if (need_g) {
        for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gyr[j] * xr[j] * inv;
      }
      if (need_x) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += gyr[j] * gv[j] * xr[j] * inv;
        dot /= static_cast<double>(d);
        double* gxr = gx->data() + r * d;
        for (std::size_t j = 0; j < d; ++j) gxr[j] += inv * (gyr[j] * gv[j] - xr[j] * inv * dot);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Gather / scatter

Var gather_rows(Var x, std::vector<std::size_t> index) {
  Tape* tape = same_tape({x});
  const Tensor& xv = x.value();
  require(xv.rank() >= 1, "gather_rows: input must have rank >= 1");
  const std::size_t c = xv.cols();
  Shape shape = xv.shape();
  shape[0] = index.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.rows()) {
      throw InputError("gather_rows: index " + std::to_string(index[i]) + " out of range for " +
                       std::to_string(xv.rows()) + " rows");
    }
    std::copy_n(xv.data() + index[i] * c, c, out.data() + i * c);
  }
  const std::size_t xi = x.id();
  return tape->record(std::move(out), {x}, [xi, c, index = std::move(index)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < index.size(); ++i) {
      const double* src = g.data() + i * c;
      double* dst = gx.data() + index[i] * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Var scatter_add_rows(std::size_t n_rows, std::span<const Var> parts, std::vector<std::vector<std::size_t>> index) {
  require(parts.size() == index.size(), "scatter_add_rows: one index list per part");
  require(!parts.empty(), "scatter_add_rows: no parts");
  Tape* tape = parts[0].tape();
  const std::size_t c = parts[0].value().cols();
  Tensor out(Shape{n_rows, c});
  std::vector<std::size_t> ids;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& pv = parts[p].value();
    require(parts[p].tape() == tape, "scatter_add_rows: parts on different tapes");
    require(pv.rank() == 2 && pv.cols() == c && pv.rows() == index[p].size(),
            "scatter_add_rows: part " + std::to_string(p) + " has shape " + shape_string(pv.shape()));
    for (std::size_t i = 0; i < index[p].size(); ++i) {
      require(index[p][i] < n_rows, "scatter_add_rows: row index out of range");
      const double* src = pv.data() + i * c;
      double* dst = out.data() + index[p][i] * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
    ids.push_back(parts[p].id());
  }
  return tape->record(std::move(out), parts, [ids, c, index = std::move(index)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (!t.requires_grad(ids[p])) continue;
      Tensor& gp = t.grad(ids[p]);
      for (std::size_t i = 0; i < index[p].size(); ++i) {
        const double* src = g.data() + index[p][i] * c;
        double* dst = gp.data() + i * c;
        for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
      }
    }
  });
}

Var gather_entries(Var x, std::vector<std::size_t> flat_index) {
  Tape* tape = same_tape({x});
  const Tensor& xv = x.value();
  Tensor out(Shape{flat_index.size(), 1});
  for (std::size_t i = 0; i < flat_index.size(); ++i) {
    require(flat_index[i] < xv.size(), "gather_entries: index out of range");
    out[i] = xv[flat_index[i]];
  }
  const std::size_t xi = x.id();
  return tape->record(std::move(out), {x}, [xi, flat_index = std::move(flat_index)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(xi);
    for (std::size_t i = 0; i < flat_index.size(); ++i) gx[flat_index[i]] += g[i];
  });
}

Var scale_rows(Var y, Var g) {
  Tape* tape = same_tape({y, g});
  const Tensor& yv = y.value();
  const Tensor& gv = g.value();
  require_rank2(yv, "scale_rows", "y");
  const std::size_t n = yv.rows(), d = yv.cols();
  require(gv.size() == n, "scale_rows: need one scale per row");
  Tensor out = yv;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] *= gv[r];
  }
  const std::size_t yi = y.id(), gi = g.id();
  return tape->record(std::move(out), {y, g}, [yi, gi, n, d](Tape& t, std::size_t self) {
    const Tensor& go = t.grad(self);
    if (t.requires_grad(yi)) {
      const Tensor& gv = t.value(gi);
      Tensor& gy = t.grad(yi);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d; ++j) gy[r * d + j] += go[r * d + j] * gv[r];
      }
    }
    if (t.requires_grad(gi)) {
      const Tensor& yv = t.value(yi);
      Tensor& gg = t.grad(gi);
      for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += go[r * d + j] * yv[r * d + j];
        gg[r] += s;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Routing

Var select_gates(Var probs, std::span<const int> topk, std::size_t k, bool renormalize) {
  Tape* tape = same_tape({probs});
  const Tensor& pv = probs.value();
  require_rank2(pv, "select_gates", "probs");
  const std::size_t n = pv.rows(), e = pv.cols();
  require(k >= 1 && k <= e, "select_gates: k must lie in [1, E]");
  require(topk.size() == n * k, "select_gates: expected " + std::to_string(n * k) + " expert ids");
  for (int id : topk) require(id >= 0 && static_cast<std::size_t>(id) < e, "select_gates: expert id out of range");
  Tensor out(Shape{n, k});
  std::vector<double> denom(n, 1.0);
  for (std::size_t t = 0; t < n; ++t) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += pv.at(t, static_cast<std::size_t>(topk[t * k + j]));
    if (renormalize) denom[t] = s;
    for (std::size_t j = 0; j < k; ++j) out.at(t, j) = pv.at(t, static_cast<std::size_t>(topk[t * k + j])) / denom[t];
  }
  std::vector<int> sel(topk.begin(), topk.end());
  const std::size_t pi = probs.id();
  return tape->record(std::move(out), {probs},
                      [pi, n, k, e, renormalize, sel = std::move(sel), denom = std::move(denom)](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        const Tensor& gates = t.value(self);
                        Tensor& gp = t.grad(pi);
                        for (std::size_t r = 0; r < n; ++r) {
                          double corr = 0.0;
                          if (renormalize) {
                            for (std::size_t j = 0; j < k; ++j) corr += g.at(r, j) * gates.at(r, j);
                          }
                          for (std::size_t j = 0; j < k; ++j) {
                            gp[r * e + static_cast<std::size_t>(sel[r * k + j])] += (g.at(r, j) - corr) / denom[r];
                          }
                        }
                      });
}

Var load_balance(Var probs, std::span<const std::size_t> counts, std::size_t k) {
  Tape* tape = same_tape({probs});
  const Tensor& pv = probs.value();
  require_rank2(pv, "load_balance", "probs");
  const std::size_t n = pv.rows(), e = pv.cols();
  if (n == 0) throw InputError("load_balance_loss: empty batch");
  require(counts.size() == e, "load_balance: need one count per expert");
  require(k >= 1, "load_balance: k must be positive");
  std::vector<double> coef(e);
  const double nk = static_cast<double>(n) * static_cast<double>(k);
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  for (std::size_t j = 0; j < e; ++j) {
    const double f = static_cast<double>(counts[j]) / nk;
    double pbar = 0.0;
    for (std::size_t t = 0; t < n; ++t) pbar += pv[t * e + j];
    pbar *= inv_n;
    loss += f * pbar;
    coef[j] = static_cast<double>(e) * f * inv_n;
  }
  loss *= static_cast<double>(e);
  const std::size_t pi = probs.id();
  return tape->record(Tensor::scalar(loss), {probs}, [pi, n, e, coef = std::move(coef)](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor& gp = t.grad(pi);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < e; ++j) gp[r * e + j] += g * coef[j];
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

Var causal_attention(Var q, Var k, Var v, std::size_t n_heads, std::span<const std::size_t> offsets) {
  Tape* tape = same_tape({q, k, v});
  const Tensor& qv = q.value();
  require_rank2(qv, "causal_attention", "q");
  require_same_shape(qv, k.value(), "causal_attention");
  require_same_shape(qv, v.value(), "causal_attention");
  const std::size_t n = qv.rows(), d = qv.cols();
  require(n_heads >= 1 && d % n_heads == 0, "causal_attention: width not divisible by head count");
  require(offsets.size() >= 2 && offsets.front() == 0 && offsets.back() == n,
          "causal_attention: offsets must start at 0 and end at the row count");
  for (std::size_t s = 1; s < offsets.size(); ++s) require(offsets[s] >= offsets[s - 1], "causal_attention: offsets must be nondecreasing");
  const std::size_t dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<std::size_t> offs(offsets.begin(), offsets.end());
  auto probs = std::make_shared<std::vector<RowMat>>();
  probs->reserve((offs.size() - 1) * n_heads);

  Tensor out(Shape{n, d});
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const Eigen::OuterStride<> stride(idx(d));
  for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
    const std::size_t o0 = offs[s], len = offs[s + 1] - offs[s];
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t base = o0 * d + h * dh;
      ConstStridedMap qm(qv.data() + base, idx(len), idx(dh), stride);
      ConstStridedMap km(kv.data() + base, idx(len), idx(dh), stride);
      ConstStridedMap vm(vv.data() + base, idx(len), idx(dh), stride);
      RowMat p = (qm * km.transpose()) * sc;
      for (std::size_t i = 0; i < len; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, p(idx(i), idx(j)));
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double ev = std::exp(p(idx(i), idx(j)) - mx);
          p(idx(i), idx(j)) = ev;
          z += ev;
        }
        for (std::size_t j = 0; j <= i; ++j) p(idx(i), idx(j)) /= z;
        for (std::size_t j = i + 1; j < len; ++j) p(idx(i), idx(j)) = 0.0;
      }
      StridedMap om(out.data() + base, idx(len), idx(dh), stride);
      om.noalias() = p * vm;
      probs->push_back(std::move(p));
    }
  }

  const std::size_t qi = q.id(), ki = k.id(), vi = v.id();
  return tape->record(
      std::move(out), {q, k, v}, [qi, ki, vi, n_heads, d, dh, sc, offs = std::move(offs), probs](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& qv = t.value(qi);
        const Tensor& kv = t.value(ki);
        const Tensor& vv = t.value(vi);
        const bool nq = t.requires_grad(qi), nk = t.requires_grad(ki), nv = t.requires_grad(vi);
        Tensor* gq = nq ? &t.grad(qi) : nullptr;
        Tensor* gk = nk ? &t.grad(ki) : nullptr;
        Tensor* gv = nv ? &t.grad(vi) : nullptr;
        const Eigen::OuterStride<> stride(idx(d));
        std::size_t slot = 0;
        for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
          const std::size_t o0 = offs[s], len = offs[s + 1] - offs[s];
          for (std::size_t h = 0; h < n_heads; ++h, ++slot) {
            const RowMat& p = (*probs)[slot];
            const std::size_t base = o0 * d + h * dh;
            ConstStridedMap gm(g.data() + base, idx(len), idx(dh), stride);
            ConstStridedMap qm(qv.data() + base, idx(len), idx(dh), stride);
            ConstStridedMap km(kv.data() + base, idx(len), idx(dh), stride);
            ConstStridedMap vm(vv.data() + base, idx(len), idx(dh), stride);
            if (nv) {
              StridedMap dv(gv->data() + base, idx(len), idx(dh), stride);
              dv.noalias() += p.transpose() * gm;
            }
            if (!nq && !nk) continue;
            RowMat dp = gm * vm.transpose();
            for (std::size_t i = 0; i < len; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j <= i; ++j) dot += p(idx(i), idx(j)) * dp(idx(i), idx(j));
              for (std::size_t j = 0; j <= i; ++j) dp(idx(i), idx(j)) = p(idx(i), idx(j)) * (dp(idx(i), idx(j)) - dot) * sc;
              for (std::size_t j = i + 1; j < len; ++j) dp(idx(i), idx(j)) = 0.0;
            }
            if (nq) {
              StridedMap dq(gq->data() + base, idx(len), idx(dh), stride);
              dq.noalias() += dp * km;
            }
            if (nk) {
              StridedMap dk(gk->data() + base, idx(len), idx(dh), stride);
              dk.noalias() += dp.transpose() * qm;
            }
          }
        }
      });
}

}  // namespace moelab
