#pragma once

#include <atomic>
#include <cstdint>
#include <string>
#include <vector>

#include "mdpd/rng.hpp"
#include "mdpd/tape.hpp"
#include "mdpd/tensor.hpp"

namespace mdpd {

inline std::uint64_t next_param_uid() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

// A named model parameter. Values live here across steps; each forward binds
// the parameter to the active tape as a leaf. `decay` marks membership in the
// weight-decay set (weight matrices only; norms, biases, gates and mask
// tokens are excluded).
template <typename Scalar>
struct Parameter {
  std::string name;
  Mat<Scalar> value;
  bool trainable = true;
  bool decay     = false;
  Segment segment = Segment::none;
  std::uint64_t uid = 0;

  Parameter() = default;
  Parameter(std::string n, Mat<Scalar> v, bool decay_, Segment seg)
      : name(std::move(n)), value(std::move(v)), decay(decay_), segment(seg),
        uid(next_param_uid()) {}

  Index size() const { return value.size(); }
};

template <typename Scalar>
Tensor<Scalar> use(Tape<Scalar>& tape, const Parameter<Scalar>& p) {
  return tape.param_leaf(p.uid, p.value, p.trainable, p.segment);
}

// ----- initializers ----------------------------------------------------------

template <typename Scalar>
Mat<Scalar> init_uniform_fan_in(Index rows, Index cols, Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Mat<Scalar> m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j)
      m(i, j) = static_cast<Scalar>(rng.uniform(-bound, bound));
  return m;
}

template <typename Scalar>
Mat<Scalar> init_zeros(Index rows, Index cols) {
  return Mat<Scalar>::Zero(rows, cols);
}

template <typename Scalar>
Mat<Scalar> init_ones(Index rows, Index cols) {
  return Mat<Scalar>::Ones(rows, cols);
}

// Truncated identity: ones on the leading diagonal, zeros elsewhere. Used to
// start the logits projector as a passthrough.
template <typename Scalar>
Mat<Scalar> init_identity_like(Index rows, Index cols) {
  Mat<Scalar> m = Mat<Scalar>::Zero(rows, cols);
  const Index k = std::min(rows, cols);
  for (Index i = 0; i < k; ++i) m(i, i) = Scalar(1);
  return m;
}

}  // namespace mdpd
