#pragma once

// Forward arithmetic for every op, shared between the recording path (tape)
// and the plain inference path (faded forward). Keeping a single numeric code
// path is what makes "train-time student output == faded output" bit-exact
// rather than merely close.

#include <algorithm>
#include <stdexcept>
#include <string>

#include "mdpd/tensor.hpp"

namespace mdpd {

enum class Broadcast : std::uint8_t { same, row, col, scalar };

namespace kernels {

template <typename Scalar>
Mat<Scalar> matmul(const Mat<Scalar>& a, const Mat<Scalar>& b, bool trans_b) {
  if (trans_b) return a * b.transpose();
  return a * b;
}

template <typename Scalar>
Mat<Scalar> add(const Mat<Scalar>& a, const Mat<Scalar>& b, Broadcast bc) {
  if (bc == Broadcast::same) return a + b;
  // row broadcast: b is 1 x cols, added to every row
  Mat<Scalar> y = a;
  y.array().rowwise() += b.row(0).array();
  return y;
}

template <typename Scalar>
Mat<Scalar> mul(const Mat<Scalar>& a, const Mat<Scalar>& b, Broadcast bc) {
  switch (bc) {
    case Broadcast::same:
      return a.cwiseProduct(b);
    case Broadcast::scalar:
      return (a.array() * b(0, 0)).matrix();
    case Broadcast::col: {
      Mat<Scalar> y = a;
      y.array().colwise() *= b.col(0).array();
      return y;
    }
    default:
      throw std::invalid_argument("mul: unsupported broadcast");
  }
}

template <typename Scalar>
Mat<Scalar> relu(const Mat<Scalar>& x) {
  return x.cwiseMax(Scalar(0));
}

template <typename Scalar>
Mat<Scalar> softmax_rows(const Mat<Scalar>& x) {
  using Arr = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  Mat<Scalar> e = x;
  Arr mx = x.rowwise().maxCoeff();
  e.array().colwise() -= mx;
  e = e.array().exp().matrix();
  Arr s = e.rowwise().sum();
  e.array().colwise() /= s;
  return e;
}

// Row-wise layer norm with affine scale/shift. xhat and inv_std are the
// buffers the backward rule needs; callers that only want the value pass
// nullptr.
template <typename Scalar>
Mat<Scalar> layernorm(const Mat<Scalar>& x, const Mat<Scalar>& gamma,
                      const Mat<Scalar>& beta, Scalar eps,
                      Mat<Scalar>* xhat_out = nullptr,
                      Mat<Scalar>* inv_std_out = nullptr) {
  using Arr = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  Arr mu = x.rowwise().mean();
  Mat<Scalar> cent = x;
  cent.array().colwise() -= mu;
  Arr var = cent.array().square().rowwise().mean();
  Arr inv_std = (var + eps).sqrt().inverse();
  Mat<Scalar> xhat = cent;
  xhat.array().colwise() *= inv_std;
  Mat<Scalar> y = xhat;
  y.array().rowwise() *= gamma.row(0).array();
  y.array().rowwise() += beta.row(0).array();
  if (xhat_out) *xhat_out = std::move(xhat);
  if (inv_std_out) {
    inv_std_out->resize(x.rows(), 1);
    inv_std_out->col(0) = inv_std.matrix();
  }
  return y;
}

// Kernel-3 convolution along the token axis (rows), zero padded, channels =
// columns. Weights are laid out tap-major: rows [t*C_in, (t+1)*C_in) hold the
// tap t in {-1, 0, +1} block.
template <typename Scalar>
Mat<Scalar> conv1d_k3(const Mat<Scalar>& x, const Mat<Scalar>& w,
                      const Mat<Scalar>& b) {
  const Index n = x.rows(), cin = x.cols(), cout = w.cols();
  Mat<Scalar> y = Mat<Scalar>::Zero(n, cout);
  for (int t = 0; t < 3; ++t) {
    const Index off = t - 1;
    const Index lo = std::max<Index>(0, -off);
    const Index hi = std::min<Index>(n, n - off);
    if (hi <= lo) continue;
    y.middleRows(lo, hi - lo) +=
        x.middleRows(lo + off, hi - lo) * w.middleRows(t * cin, cin);
  }
  y.array().rowwise() += b.row(0).array();
  return y;
}

template <typename Scalar>
Mat<Scalar> gap(const Mat<Scalar>& x) {
  Mat<Scalar> y(1, x.cols());
  y.row(0) = x.colwise().mean();
  return y;
}

// Sum of squared residuals; the "mse" in the name refers to the family of
// squared-error objectives, reduction is a plain sum.
template <typename Scalar>
Mat<Scalar> mse_like(const Mat<Scalar>& a, const Mat<Scalar>& b,
                     Mat<Scalar>* residual_out = nullptr) {
  Mat<Scalar> r = a - b;
  Mat<Scalar> y(1, 1);
  y(0, 0) = r.squaredNorm();
  if (residual_out) *residual_out = std::move(r);
  return y;
}

}  // namespace kernels
}  // namespace mdpd
