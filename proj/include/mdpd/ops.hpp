#pragma once

// Free-function surface over the tape plus the handful of compositions the
// models need. Everything here bottoms out in the nine recorded op kinds.

#include <utility>
#include <vector>

#include "mdpd/tape.hpp"

namespace mdpd {

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  return a.tape()->matmul(a, b, false);
}

// y = a * b^T; same op kind, documented transpose-right shape rule.
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  return a.tape()->matmul(a, b, true);
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return a.tape()->add(a, b);
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return a.tape()->mul(a, b);
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  return a.tape()->relu(a);
}

template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
  return a.tape()->softmax_rows(a);
}

template <typename S>
Tensor<S> layernorm(const Tensor<S>& x, const Tensor<S>& gamma,
                    const Tensor<S>& beta, S eps = Tape<S>::default_ln_eps()) {
  return x.tape()->layernorm(x, gamma, beta, eps);
}

template <typename S>
Tensor<S> conv1d_k3(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return x.tape()->conv1d_k3(x, w, b);
}

template <typename S>
Tensor<S> gap(const Tensor<S>& x) {
  return x.tape()->gap(x);
}

template <typename S>
Tensor<S> mse_like(const Tensor<S>& a, const Tensor<S>& b) {
  return a.tape()->mse_like(a, b);
}

template <typename S>
Tensor<S> detach(const Tensor<S>& t) {
  return t.tape()->detach(t);
}

// ----- compositions ---------------------------------------------------------

template <typename S>
Tensor<S> scalar_const(Tape<S>& tape, S v) {
  Mat<S> m(1, 1);
  m(0, 0) = v;
  return tape.constant(std::move(m));
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  return mul(a, scalar_const(*a.tape(), c));
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, scale(b, S(-1)));
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add(matmul(x, w), b);
}

template <typename S>
Tensor<S> sum_of(const std::vector<Tensor<S>>& terms) {
  if (terms.empty()) throw std::invalid_argument("sum_of: no terms");
  Tensor<S> acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

// sigmoid(alpha) and 1 - sigmoid(alpha) for a 1x1 gate, built inside the op
// closure through softmax_rows([alpha, 0]) = [sigmoid(alpha), 1-sigmoid(alpha)].
// Selector matmuls split the pair back into scalars.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> gate_pair(const Tensor<S>& alpha) {
  Tape<S>& tape = *alpha.tape();
  Mat<S> widen(1, 2);
  widen << S(1), S(0);
  Tensor<S> row   = matmul(alpha, tape.constant(widen));  // [alpha, 0]
  Tensor<S> gates = softmax_rows(row);
  Mat<S> pick0(2, 1), pick1(2, 1);
  pick0 << S(1), S(0);
  pick1 << S(0), S(1);
  return {matmul(gates, tape.constant(pick0)), matmul(gates, tape.constant(pick1))};
}

}  // namespace mdpd
