#pragma once

// Finite-difference oracle. Central differences with step h, compared against
// the tape's reverse-mode gradients; the relative error is
//   |analytic - fd| / max(1, |analytic|, |fd|).
// The forward callable is evaluated twice up front; if the two scalar values
// differ bitwise the callable is nondeterministic and the check refuses to
// proceed (finite differences of a noisy function are meaningless).

#include <cmath>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <vector>

#include "mdpd/params.hpp"
#include "mdpd/tape.hpp"

namespace mdpd {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::int64_t coords_checked = 0;
};

namespace detail {
inline void fold_error(GradCheckReport& rep, double analytic, double fd) {
  const double abs_err = std::abs(analytic - fd);
  const double scale   = std::max({1.0, std::abs(analytic), std::abs(fd)});
  rep.max_abs_error    = std::max(rep.max_abs_error, abs_err);
  rep.max_rel_error    = std::max(rep.max_rel_error, abs_err / scale);
  rep.coords_checked++;
}
}  // namespace detail

// Op-level form: fn builds a scalar tensor from differentiable leaves that
// wrap `point`.
template <typename Scalar, typename Fn>
GradCheckReport grad_check(Fn&& fn, const std::vector<Mat<Scalar>>& point, Scalar h) {
  auto eval = [&](const std::vector<Mat<Scalar>>& at) -> Scalar {
    Tape<Scalar> tape;
    std::vector<Tensor<Scalar>> leaves;
    leaves.reserve(at.size());
    for (const auto& m : at) leaves.push_back(tape.variable(m, false));
    Tensor<Scalar> loss = fn(tape, leaves);
    if (loss.rows() != 1 || loss.cols() != 1)
      throw std::invalid_argument("grad_check: forward_fn must be scalar-valued");
    return loss.item();
  };

  const Scalar v1 = eval(point);
  const Scalar v2 = eval(point);
  if (std::memcmp(&v1, &v2, sizeof(Scalar)) != 0)
    throw std::invalid_argument("grad_check: forward_fn is nondeterministic");

  // analytic pass
  Tape<Scalar> tape;
  std::vector<Tensor<Scalar>> leaves;
  leaves.reserve(point.size());
  for (const auto& m : point) leaves.push_back(tape.variable(m, true));
  Tensor<Scalar> loss = fn(tape, leaves);
  if (loss.rows() != 1 || loss.cols() != 1)
    throw std::invalid_argument("grad_check: forward_fn must be scalar-valued");
  GradientMap<Scalar> gm = tape.backward(loss);

  GradCheckReport rep;
  std::vector<Mat<Scalar>> work = point;
  for (std::size_t li = 0; li < work.size(); ++li) {
    Mat<Scalar> analytic = gm.contains(leaves[li])
                               ? gm.at(leaves[li])
                               : Mat<Scalar>::Zero(point[li].rows(), point[li].cols());
    for (Index i = 0; i < work[li].rows(); ++i) {
      for (Index j = 0; j < work[li].cols(); ++j) {
        const Scalar orig = work[li](i, j);
        work[li](i, j)    = orig + h;
        const Scalar fp   = eval(work);
        work[li](i, j)    = orig - h;
        const Scalar fm   = eval(work);
        work[li](i, j)    = orig;
        const double fd   = (static_cast<double>(fp) - static_cast<double>(fm)) /
                          (2.0 * static_cast<double>(h));
        detail::fold_error(rep, static_cast<double>(analytic(i, j)), fd);
      }
    }
  }
  return rep;
}

// Model-level form: `build` assembles the objective from live Parameters
// (bound to the tape via use()); finite differences perturb the parameter
// values in place and rebuild.
template <typename Scalar, typename Build>
GradCheckReport grad_check_params(Build&& build,
                                  const std::vector<Parameter<Scalar>*>& params,
                                  Scalar h) {
  auto eval = [&]() -> Scalar {
    Tape<Scalar> tape;
    Tensor<Scalar> loss = build(tape);
    if (loss.rows() != 1 || loss.cols() != 1)
      throw std::invalid_argument("grad_check: objective must be scalar-valued");
    return loss.item();
  };

  const Scalar v1 = eval();
  const Scalar v2 = eval();
  if (std::memcmp(&v1, &v2, sizeof(Scalar)) != 0)
    throw std::invalid_argument("grad_check: objective is nondeterministic");

  Tape<Scalar> tape;
  Tensor<Scalar> loss    = build(tape);
  GradientMap<Scalar> gm = tape.backward(loss);

  GradCheckReport rep;
  for (Parameter<Scalar>* p : params) {
    const std::int64_t node = tape.param_node(p->uid);
    Mat<Scalar> analytic    = (node >= 0 && gm.contains(node))
                                  ? gm.at(node)
                                  : Mat<Scalar>::Zero(p->value.rows(), p->value.cols());
    for (Index i = 0; i < p->value.rows(); ++i) {
      for (Index j = 0; j < p->value.cols(); ++j) {
        const Scalar orig = p->value(i, j);
        p->value(i, j)    = orig + h;
        const Scalar fp   = eval();
        p->value(i, j)    = orig - h;
        const Scalar fm   = eval();
        p->value(i, j)    = orig;
        const double fd   = (static_cast<double>(fp) - static_cast<double>(fm)) /
                          (2.0 * static_cast<double>(h));
        detail::fold_error(rep, static_cast<double>(analytic(i, j)), fd);
      }
    }
  }
  return rep;
}

}  // namespace mdpd
