#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <sstream>
#include <string>

namespace mdpd {

// All values in the engine are dense row-major matrices: a token sequence is
// tokens x dim, a vector is a single row, a scalar is 1x1. Row-major matches
// the checkpoint payload layout and the token-axis conv.
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  add,
  mul,
  relu,
  softmax_rows,
  layernorm,
  conv1d_k3,
  gap,
  mse_like,
};

inline const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::relu: return "relu";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::layernorm: return "layernorm";
    case OpKind::conv1d_k3: return "conv1d_k3";
    case OpKind::gap: return "gap";
    case OpKind::mse_like: return "mse_like";
  }
  return "?";
}

// Model segments used to attribute stored backward buffers. "none" covers
// loss plumbing and test scaffolding that should not pollute model segments.
enum class Segment : std::uint8_t { none = 0, backbone, side, projector, head };
inline constexpr int kSegmentCount = 5;

inline const char* to_string(Segment s) {
  switch (s) {
    case Segment::none: return "none";
    case Segment::backbone: return "backbone";
    case Segment::side: return "side";
    case Segment::projector: return "projector";
    case Segment::head: return "head";
  }
  return "?";
}

inline std::string shape_str(Index rows, Index cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

template <typename Scalar>
std::string shape_str(const Mat<Scalar>& m) {
  return shape_str(m.rows(), m.cols());
}

}  // namespace mdpd
