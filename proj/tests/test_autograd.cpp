#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "fixtures.hpp"
#include "moelab/autograd.hpp"
#include "moelab/error.hpp"
#include "moelab/optim.hpp"
#include "oracles.hpp"

using namespace moelab;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(shape);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

using Build = std::function<Var(Tape&, std::vector<Var>&)>;

// Gradcheck of sum(out * R) for a random projection R, against central
// differences over every input entry.
GradCheckResult check_op(std::vector<Tensor> inputs, const Build& build, std::uint64_t seed = 7) {
  Tensor projection;
  auto scalar = [&](Tape& tape, std::vector<Var>& vars) {
    Var out = build(tape, vars);
    if (projection.empty()) {
      Rng r(seed);
      projection = random_tensor(r, out.value().shape());
    }
    return sum(mul(out, tape.constant(projection)));
  };
  std::vector<Tensor> grads;
  for (const auto& t : inputs) grads.emplace_back(t.shape());
  {
    Tape tape;
    std::vector<Var> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.parameter(inputs[i], &grads[i]));
    tape.backward(scalar(tape, vars));
  }
  std::vector<Tensor*> ptrs;
  for (auto& t : inputs) ptrs.push_back(&t);
  auto loss = [&]() {
    Tape tape;
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(tape.parameter(t, nullptr));
    return scalar(tape, vars).value().item();
  };
  return finite_difference_check(loss, ptrs, grads, 1e-6);
}

}  // namespace

TEST_CASE("matmul and affine match naive loops") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(6), k = 1 + rng.below(6), n = 1 + rng.below(6);
    Tensor a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n}), bias = random_tensor(rng, {n});
    Tape tape;
    const Tensor out = affine(tape.constant(a), tape.constant(b), tape.constant(bias)).value();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        oracle::hp s = bias[j];
        for (std::size_t p = 0; p < k; ++p) s += oracle::hp(a.at(i, p)) * b.at(p, j);
        CHECK(out.at(i, j) == doctest::Approx(static_cast<double>(s)).epsilon(1e-13));
      }
    }
  }
}

TEST_CASE("softmax, logsumexp and cross entropy against high precision") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.below(4), cols = 1 + rng.below(9);
    Tensor x = random_tensor(rng, {rows, cols}, 20.0);
    std::vector<int> targets;
    for (std::size_t r = 0; r < rows; ++r) targets.push_back(static_cast<int>(rng.below(cols)));
    const Tensor p = softmax_rows(x);
    const Tensor lse = logsumexp_rows(x);
    Tape tape;
    const double ce = cross_entropy(tape.constant(x), targets).value().item();
    oracle::hp ce_ref = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      oracle::hp s = 0;
      for (std::size_t c = 0; c < cols; ++c) s += exp(oracle::hp(x.at(r, c)));
      const oracle::hp l = log(s);
      CHECK(lse[r] == doctest::Approx(static_cast<double>(l)).epsilon(1e-14));
      for (std::size_t c = 0; c < cols; ++c) {
        CHECK(std::abs(p.at(r, c) - static_cast<double>(exp(oracle::hp(x.at(r, c)) - l))) < 1e-15);
      }
      ce_ref += l - oracle::hp(x.at(r, static_cast<std::size_t>(targets[r])));
    }
    CHECK(ce == doctest::Approx(static_cast<double>(ce_ref / rows)).epsilon(1e-13));
  }
}

TEST_CASE("softmax rejects non-finite logits") {
  Tape tape;
  Tensor x = Tensor::matrix({{1.0, NAN}});
  CHECK_THROWS_AS(softmax(tape.constant(x)), NumericalError);
}

TEST_CASE("shape violations throw ConfigError") {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({2, 3}));
  CHECK_THROWS_AS(matmul(a, b), ConfigError);
  CHECK_THROWS_AS(add(a, tape.constant(Tensor({3, 2}))), ConfigError);
}

TEST_CASE("elementwise and reduction gradients") {
  Rng rng(3);
  const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4});
  CHECK(check_op({a, b}, [](Tape&, std::vector<Var>& v) { return add(v[0], v[1]); }).max_rel_error < 1e-7);
  CHECK(check_op({a, b}, [](Tape&, std::vector<Var>& v) { return mul(v[0], v[1]); }).max_rel_error < 1e-7);
  CHECK(check_op({a}, [](Tape&, std::vector<Var>& v) { return scale(v[0], -2.5); }).max_rel_error < 1e-7);
  CHECK(check_op({a}, [](Tape&, std::vector<Var>& v) { return square(v[0]); }).max_rel_error < 1e-7);
  CHECK(check_op({a}, [](Tape&, std::vector<Var>& v) { return silu(v[0]); }).max_rel_error < 1e-7);
  CHECK(check_op({a}, [](Tape&, std::vector<Var>& v) { return mean(v[0]); }).max_rel_error < 1e-7);
  const Tensor s1 = Tensor::scalar(0.3), s2 = Tensor::scalar(-1.7);
  CHECK(check_op({s1, s2},
                 [](Tape&, std::vector<Var>& v) {
                   const double w[] = {0.25, 3.0};
                   return weighted_sum(v, w);
                 })
            .max_rel_error < 1e-7);
}

TEST_CASE("linear algebra gradients") {
  Rng rng(4);
  const Tensor x = random_tensor(rng, {5, 3}), w = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4});
  CHECK(check_op({x, w}, [](Tape&, std::vector<Var>& v) { return matmul(v[0], v[1]); }).max_rel_error < 1e-7);
  CHECK(check_op({x, w, b}, [](Tape&, std::vector<Var>& v) { return affine(v[0], v[1], v[2]); }).max_rel_error < 1e-7);
  const Tensor gain = random_tensor(rng, {3});
  CHECK(check_op({x, gain}, [](Tape&, std::vector<Var>& v) { return rmsnorm(v[0], v[1], 1e-6); }).max_rel_error < 1e-6);
}

TEST_CASE("softmax family gradients") {
  Rng rng(5);
  const Tensor x = random_tensor(rng, {4, 6}, 2.0);
  CHECK(check_op({x}, [](Tape&, std::vector<Var>& v) { return softmax(v[0]); }).max_rel_error < 1e-6);
  CHECK(check_op({x}, [](Tape&, std::vector<Var>& v) { return logsumexp(v[0]); }).max_rel_error < 1e-6);
  CHECK(check_op({x},
                 [](Tape&, std::vector<Var>& v) {
                   const int t[] = {0, 5, 2, 2};
                   return cross_entropy(v[0], t);
                 })
            .max_rel_error < 1e-6);
}

TEST_CASE("gather and scatter gradients") {
  Rng rng(6);
  const Tensor x = random_tensor(rng, {5, 3});
  CHECK(check_op({x}, [](Tape&, std::vector<Var>& v) { return gather_rows(v[0], {4, 0, 0, 2}); }).max_rel_error < 1e-7);
  CHECK(check_op({x}, [](Tape&, std::vector<Var>& v) { return gather_entries(v[0], {14, 0, 7, 7}); }).max_rel_error < 1e-7);
  const Tensor p1 = random_tensor(rng, {2, 3}), p2 = random_tensor(rng, {3, 3});
  CHECK(check_op({p1, p2},
                 [](Tape&, std::vector<Var>& v) {
                   return scatter_add_rows(4, std::vector<Var>{v[0], v[1]}, {{1, 3}, {1, 0, 2}});
                 })
            .max_rel_error < 1e-7);
  const Tensor y = random_tensor(rng, {4, 3}), g = random_tensor(rng, {4, 1});
  CHECK(check_op({y, g}, [](Tape&, std::vector<Var>& v) { return scale_rows(v[0], v[1]); }).max_rel_error < 1e-7);
}

TEST_CASE("gate selection and balance loss gradients") {
  Rng rng(7);
  const Tensor probs = softmax_rows(random_tensor(rng, {6, 5}));
  const std::vector<int> topk = topk_indices(probs, 2);
  for (bool renorm : {false, true}) {
    CHECK(check_op({probs}, [&](Tape&, std::vector<Var>& v) { return select_gates(v[0], topk, 2, renorm); }).max_rel_error <
          1e-6);
  }
  const std::vector<std::size_t> counts{3, 0, 4, 2, 3};
  CHECK(check_op({probs}, [&](Tape&, std::vector<Var>& v) { return load_balance(v[0], counts, 2); }).max_rel_error < 1e-7);
}

TEST_CASE("causal attention gradients over packed sequences") {
  Rng rng(8);
  const Tensor q = random_tensor(rng, {7, 4}), k = random_tensor(rng, {7, 4}), v = random_tensor(rng, {7, 4});
  const std::vector<std::size_t> offsets{0, 3, 7};
  CHECK(check_op({q, k, v}, [&](Tape&, std::vector<Var>& x) { return causal_attention(x[0], x[1], x[2], 2, offsets); })
            .max_rel_error < 1e-6);
}

TEST_CASE("causal attention ignores the future and other sequences") {
  Rng rng(9);
  Tensor q = random_tensor(rng, {6, 4}), k = random_tensor(rng, {6, 4}), v = random_tensor(rng, {6, 4});
  const std::vector<std::size_t> offsets{0, 4, 6};
  Tape t1;
  const Tensor base = causal_attention(t1.constant(q), t1.constant(k), t1.constant(v), 2, offsets).value();
  // Perturb position 2 of sequence 0 and all of sequence 1.
  for (std::size_t c = 0; c < 4; ++c) {
    k.at(2, c) += 1.0;
    v.at(2, c) -= 2.0;
    v.at(5, c) += 3.0;
  }
  Tape t2;
  const Tensor moved = causal_attention(t2.constant(q), t2.constant(k), t2.constant(v), 2, offsets).value();
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(moved.at(0, c) == base.at(0, c));
    CHECK(moved.at(1, c) == base.at(1, c));
    CHECK(moved.at(4, c) == base.at(4, c));
  }
  // First position attends only to itself.
  for (std::size_t c = 0; c < 4; ++c) CHECK(base.at(4, c) == v.at(4, c));
}

TEST_CASE("frozen parameters receive no gradient") {
  Tensor w = Tensor::matrix({{1.0, 2.0}, {3.0, 4.0}});
  Tensor x = Tensor::matrix({{0.5, -1.0}});
  Tensor gw({2, 2});
  Tape tape;
  Var xv = tape.parameter(x, nullptr);
  Var wv = tape.parameter(w, &gw);
  tape.backward(sum(matmul(xv, wv)));
  CHECK(gw.at(0, 0) == 0.5);
  CHECK(gw.at(1, 1) == -1.0);
  CHECK_FALSE(xv.requires_grad());
}

TEST_CASE("AdamW step follows the closed form") {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  std::vector<Tensor> params{Tensor::vector({1.0, -2.0})};
  std::vector<Tensor> grads{Tensor::vector({0.5, 0.0})};
  auto state = OptimizerState::create(cfg, params, {true});
  adamw_step(params, grads, state);
  // First step: m_hat = g, v_hat = g^2 -> update g / (|g| + eps).
  CHECK(params[0][0] == doctest::Approx(1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0)).epsilon(1e-15));
  CHECK(params[0][1] == doctest::Approx(-2.0 - 0.1 * (0.0 + 0.01 * -2.0)).epsilon(1e-15));
  CHECK(state.step == 1);
}

TEST_CASE("AdamW rejects non-finite gradients without touching parameters") {
  std::vector<Tensor> params{Tensor::vector({1.0})};
  std::vector<Tensor> grads{Tensor::vector({INFINITY})};
  auto state = OptimizerState::create({}, params, {true});
  CHECK_THROWS_AS(adamw_step(params, grads, state), NumericalError);
  CHECK(params[0][0] == 1.0);
  CHECK(state.step == 0);
}

TEST_CASE("gradient clipping") {
  std::vector<Tensor> grads{Tensor::vector({3.0}), Tensor::vector({4.0})};
  CHECK(clip_grad_norm(grads, 1.0) == doctest::Approx(5.0));
  CHECK(grads[0][0] == doctest::Approx(0.6));
  CHECK(grads[1][0] == doctest::Approx(0.8));
  CHECK(clip_grad_norm(grads, 10.0) == doctest::Approx(1.0));
  CHECK(grads[1][0] == doctest::Approx(0.8));
}
