#pragma once

// Reverse-mode tape over dense matrices. One tape records one model step;
// backward walks the nodes in strict reverse creation order (creation order
// is topological by construction), accumulates gradients into leaves, then
// releases every retained buffer.
//
// The ledger is the part that earns its keep: at record time each op declares
// exactly the buffers its backward rule will need, split into saved input
// activations ({a}) and derivative buffers of the pre-activation ({sigma'}).
// Pure-linear ops retain inputs only for the factors whose counterpart is
// trainable; nonlinearities retain a derivative buffer of dim(z) whenever any
// gradient will pass through them. That asymmetry is the whole memory story:
// freezing weights shrinks {a} but never {sigma'}.

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mdpd/kernels.hpp"
#include "mdpd/tensor.hpp"

namespace mdpd {

template <typename Scalar>
class Tape;

template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  bool defined() const { return tape_ != nullptr; }
  Tape<Scalar>* tape() const { return tape_; }
  std::int64_t id() const { return id_; }

  const Mat<Scalar>& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Scalar item() const;
  bool requires_grad() const;

 private:
  friend class Tape<Scalar>;
  Tensor(Tape<Scalar>* t, std::int64_t id) : tape_(t), id_(id) {}
  Tape<Scalar>* tape_ = nullptr;
  std::int64_t id_ = -1;
};

struct SegmentCounts {
  std::int64_t activations = 0;
  std::int64_t act_derivs = 0;
  std::int64_t total() const { return activations + act_derivs; }
};

struct MemoryLedger {
  std::int64_t activations_stored = 0;
  std::int64_t act_derivs_stored = 0;
  std::array<SegmentCounts, kSegmentCount> per_segment{};

  const SegmentCounts& segment(Segment s) const {
    return per_segment[static_cast<int>(s)];
  }
  std::int64_t total() const { return activations_stored + act_derivs_stored; }
};

template <typename Scalar>
struct GradientMap {
  std::unordered_map<std::int64_t, Mat<Scalar>> grads;

  bool contains(const Tensor<Scalar>& t) const { return grads.count(t.id()) != 0; }
  bool contains(std::int64_t node) const { return grads.count(node) != 0; }
  const Mat<Scalar>& at(const Tensor<Scalar>& t) const { return grads.at(t.id()); }
  const Mat<Scalar>& at(std::int64_t node) const { return grads.at(node); }
  std::size_t size() const { return grads.size(); }
};

template <typename Scalar>
class Tape {
 public:
  using M = Mat<Scalar>;
  using T = Tensor<Scalar>;

  // ----- leaves ------------------------------------------------------------

  T constant(M v) { return make_leaf(std::move(v), false, false, 0); }

  T variable(M v, bool requires_grad = true) {
    return make_leaf(std::move(v), requires_grad, false, 0);
  }

  // One leaf per parameter per tape: repeated uses (and batch loops) hit the
  // same node so gradients accumulate where they should.
  T param_leaf(std::uint64_t uid, const M& v, bool trainable, Segment seg) {
    auto it = param_nodes_.find(uid);
    if (it != param_nodes_.end()) return T(this, it->second);
    Segment keep = segment_;
    segment_ = seg;
    T t = make_leaf(v, trainable, true, uid);
    segment_ = keep;
    param_nodes_[uid] = t.id();
    return t;
  }

  // Constant copy of a recorded value: gradients stop here.
  T detach(const T& t) {
    check_same_tape(t, "detach");
    return make_leaf(node(t.id()).value, false, false, 0);
  }

  // ----- recording ---------------------------------------------------------

  T matmul(const T& a, const T& b, bool trans_b = false) {
    check_binary(a, b, "matmul");
    const Index inner_a = av(a).cols();
    const Index inner_b = trans_b ? bv(b).cols() : bv(b).rows();
    if (inner_a != inner_b)
      throw std::invalid_argument(op_shapes("matmul", a, b) + ": inner dimensions differ");
    Node n           = base_node(OpKind::matmul, {a.id(), b.id()}, 2);
    n.trans_b        = trans_b;
    n.value          = kernels::matmul(av(a), bv(b), trans_b);
    if (node(b.id()).requires_grad) save_input(n, a);
    if (node(a.id()).requires_grad) save_input(n, b);
    return push(std::move(n));
  }

  T add(const T& a, const T& b) {
    check_binary(a, b, "add");
    Broadcast bc;
    if (av(a).rows() == bv(b).rows() && av(a).cols() == bv(b).cols())
      bc = Broadcast::same;
    else if (bv(b).rows() == 1 && bv(b).cols() == av(a).cols())
      bc = Broadcast::row;
    else
      throw std::invalid_argument(op_shapes("add", a, b) +
                                  ": need equal shapes or a 1-row right operand");
    Node n  = base_node(OpKind::add, {a.id(), b.id()}, 2);
    n.bcast = bc;
    n.value = kernels::add(av(a), bv(b), bc);
    return push(std::move(n));  // backward needs shapes only
  }

  T mul(const T& a, const T& b) {
    check_binary(a, b, "mul");
    Broadcast bc;
    if (av(a).rows() == bv(b).rows() && av(a).cols() == bv(b).cols())
      bc = Broadcast::same;
    else if (bv(b).rows() == 1 && bv(b).cols() == 1)
      bc = Broadcast::scalar;
    else if (bv(b).cols() == 1 && bv(b).rows() == av(a).rows())
      bc = Broadcast::col;
    else
      throw std::invalid_argument(op_shapes("mul", a, b) +
                                  ": need equal shapes, a scalar, or a column");
    Node n  = base_node(OpKind::mul, {a.id(), b.id()}, 2);
    n.bcast = bc;
    n.value = kernels::mul(av(a), bv(b), bc);
    if (node(b.id()).requires_grad) save_input(n, a);
    if (node(a.id()).requires_grad) save_input(n, b);
    return push(std::move(n));
  }

  T relu(const T& a) {
    check_same_tape(a, "relu");
    Node n  = base_node(OpKind::relu, {a.id()}, 1);
    n.value = kernels::relu(av(a));
    if (n.requires_grad)
      n.sigma = (av(a).array() > Scalar(0)).template cast<Scalar>().matrix();
    return push(std::move(n));
  }

  T softmax_rows(const T& a) {
    check_same_tape(a, "softmax_rows");
    Node n  = base_node(OpKind::softmax_rows, {a.id()}, 1);
    n.value = kernels::softmax_rows(av(a));
    // The derivative buffer is the output itself; backward reads the node
    // value, the ledger census counts it as a sigma' of dim(z).
    return push(std::move(n));
  }

  T layernorm(const T& x, const T& gamma, const T& beta, Scalar eps) {
    check_same_tape(x, "layernorm");
    check_same_tape(gamma, "layernorm");
    check_same_tape(beta, "layernorm");
    if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 ||
        beta.cols() != x.cols())
      throw std::invalid_argument(
          "layernorm(" + shape_str(av(x)) + ", " + shape_str(av(gamma)) + ", " +
          shape_str(av(beta)) + "): scale/shift must be 1x" + std::to_string(x.cols()));
    Node n = base_node(OpKind::layernorm, {x.id(), gamma.id(), beta.id()}, 3);
    n.eps  = eps;
    if (n.requires_grad) {
      n.value = kernels::layernorm(av(x), av(gamma), av(beta), eps, &n.sigma, &n.aux);
      if (node(x.id()).requires_grad) save_input(n, gamma);
    } else {
      n.value = kernels::layernorm(av(x), av(gamma), av(beta), eps);
    }
    return push(std::move(n));
  }

  T conv1d_k3(const T& x, const T& w, const T& b) {
    check_same_tape(x, "conv1d_k3");
    check_same_tape(w, "conv1d_k3");
    check_same_tape(b, "conv1d_k3");
    if (w.rows() != 3 * x.cols())
      throw std::invalid_argument("conv1d_k3(" + shape_str(av(x)) + ", " +
                                  shape_str(av(w)) +
                                  "): weight rows must be 3 * input channels");
    if (b.rows() != 1 || b.cols() != w.cols())
      throw std::invalid_argument("conv1d_k3: bias must be 1x" + std::to_string(w.cols()));
    Node n  = base_node(OpKind::conv1d_k3, {x.id(), w.id(), b.id()}, 3);
    n.value = kernels::conv1d_k3(av(x), av(w), av(b));
    if (node(w.id()).requires_grad) save_input(n, x);
    if (node(x.id()).requires_grad) save_input(n, w);
    return push(std::move(n));
  }

  T gap(const T& x) {
    check_same_tape(x, "gap");
    Node n  = base_node(OpKind::gap, {x.id()}, 1);
    n.value = kernels::gap(av(x));
    return push(std::move(n));
  }

  T mse_like(const T& a, const T& b) {
    check_binary(a, b, "mse_like");
    if (av(a).rows() != bv(b).rows() || av(a).cols() != bv(b).cols())
      throw std::invalid_argument(op_shapes("mse_like", a, b) + ": shapes must match");
    Node n = base_node(OpKind::mse_like, {a.id(), b.id()}, 2);
    if (n.requires_grad) {
      n.value = kernels::mse_like(av(a), bv(b), &n.owned_act);
    } else {
      n.value = kernels::mse_like(av(a), bv(b));
    }
    return push(std::move(n));
  }

  // Uniform entry point over the op closure; typed calls above are the
  // ergonomic face of the same recording.
  T record(OpKind kind, const std::vector<T>& in) {
    auto want = [&](std::size_t k, const char* name) {
      if (in.size() != k)
        throw std::invalid_argument(std::string(name) + ": expected " +
                                    std::to_string(k) + " inputs, got " +
                                    std::to_string(in.size()));
    };
    switch (kind) {
      case OpKind::matmul:       want(2, "matmul");       return matmul(in[0], in[1]);
      case OpKind::add:          want(2, "add");          return add(in[0], in[1]);
      case OpKind::mul:          want(2, "mul");          return mul(in[0], in[1]);
      case OpKind::relu:         want(1, "relu");         return relu(in[0]);
      case OpKind::softmax_rows: want(1, "softmax_rows"); return softmax_rows(in[0]);
      case OpKind::layernorm:    want(3, "layernorm");    return layernorm(in[0], in[1], in[2], default_ln_eps());
      case OpKind::conv1d_k3:    want(3, "conv1d_k3");    return conv1d_k3(in[0], in[1], in[2]);
      case OpKind::gap:          want(1, "gap");          return gap(in[0]);
      case OpKind::mse_like:     want(2, "mse_like");     return mse_like(in[0], in[1]);
      case OpKind::leaf: break;
    }
    throw std::invalid_argument("record: leaf is not a recordable op");
  }

  static constexpr Scalar default_ln_eps() { return Scalar(1e-5); }

  // ----- backward ----------------------------------------------------------

  GradientMap<Scalar> backward(const T& loss) {
    check_same_tape(loss, "backward");
    if (consumed_)
      throw std::logic_error("backward: tape already consumed; record a new forward first");
    const Node& ln = node(loss.id());
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(ln.value));

    std::vector<M> grad(nodes_.size());
    std::vector<char> has(nodes_.size(), 0);
    if (ln.requires_grad) {
      grad[loss.id()] = M::Ones(1, 1);
      has[loss.id()]  = 1;
    }

    for (std::int64_t id = loss.id(); id >= 0; --id) {
      if (!has[id]) continue;
      const Node& n = nodes_[id];
      if (!n.requires_grad || n.kind == OpKind::leaf) continue;
      step_backward(n, grad[id], grad, has);
      grad[id].resize(0, 0);  // upstream grads are consumed immediately
      has[id] = 0;
    }

    GradientMap<Scalar> out;
    for (std::int64_t id = 0; id < static_cast<std::int64_t>(nodes_.size()); ++id) {
      if (nodes_[id].kind == OpKind::leaf && nodes_[id].requires_grad && has[id])
        out.grads.emplace(id, std::move(grad[id]));
    }
    release();
    consumed_ = true;
    return out;
  }

  // ----- introspection -----------------------------------------------------

  MemoryLedger ledger_snapshot() const {
    MemoryLedger led;
    std::unordered_set<std::int64_t> seen;
    auto& seg = led.per_segment;
    for (const Node& n : nodes_) {
      const int s = static_cast<int>(n.segment);
      if (n.sigma.size()) seg[s].act_derivs += n.sigma.size();
      if (n.aux.size()) seg[s].act_derivs += n.aux.size();
      if (n.kind == OpKind::softmax_rows && n.requires_grad)
        seg[s].act_derivs += n.value.size();
      if (n.owned_act.size()) seg[s].activations += n.owned_act.size();
      for (std::int64_t sid : n.saved) {
        if (!seen.insert(sid).second) continue;
        const Node& sn = nodes_[sid];
        if (sn.is_param) continue;  // parameters persist regardless of backward
        seg[static_cast<int>(sn.segment)].activations += sn.value.size();
      }
    }
    for (const SegmentCounts& c : seg) {
      led.activations_stored += c.activations;
      led.act_derivs_stored += c.act_derivs;
    }
    return led;
  }

  void reset() {
    nodes_.clear();
    param_nodes_.clear();
    consumed_ = false;
    segment_  = Segment::none;
  }

  void set_segment(Segment s) { segment_ = s; }
  Segment segment() const { return segment_; }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  const M& value(std::int64_t id) const { return node(id).value; }
  bool requires_grad(std::int64_t id) const { return node(id).requires_grad; }
  bool is_param(std::int64_t id) const { return node(id).is_param; }

  std::int64_t param_node(std::uint64_t uid) const {
    auto it = param_nodes_.find(uid);
    return it == param_nodes_.end() ? -1 : it->second;
  }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::array<std::int64_t, 3> in{{-1, -1, -1}};
    int n_in = 0;
    M value;
    bool requires_grad = false;
    bool is_param      = false;
    std::uint64_t param_uid = 0;
    Segment segment = Segment::none;

    std::vector<std::int64_t> saved;  // retained input activations
    M sigma;      // derivative buffer (relu mask, layernorm xhat)
    M aux;        // layernorm per-row inverse std
    M owned_act;  // mse residual

    bool trans_b  = false;
    Broadcast bcast = Broadcast::same;
    Scalar eps = Scalar(0);
  };

  const Node& node(std::int64_t id) const { return nodes_.at(id); }
  Node& node(std::int64_t id) { return nodes_.at(id); }
  const M& av(const T& t) const { return node(t.id()).value; }
  const M& bv(const T& t) const { return node(t.id()).value; }

  T make_leaf(M v, bool requires_grad, bool is_param, std::uint64_t uid) {
    Node n;
    n.kind          = OpKind::leaf;
    n.value         = std::move(v);
    n.requires_grad = requires_grad;
    n.is_param      = is_param;
    n.param_uid     = uid;
    n.segment       = segment_;
    return push(std::move(n));
  }

  Node base_node(OpKind kind, std::initializer_list<std::int64_t> in, int n_in) {
    Node n;
    n.kind = kind;
    n.n_in = n_in;
    int i  = 0;
    for (std::int64_t id : in) n.in[i++] = id;
    n.segment = segment_;
    for (int k = 0; k < n_in; ++k)
      if (nodes_[n.in[k]].requires_grad) n.requires_grad = true;
    return n;
  }

  T push(Node n) {
    nodes_.push_back(std::move(n));
    return T(this, static_cast<std::int64_t>(nodes_.size() - 1));
  }

  void save_input(Node& n, const T& t) { n.saved.push_back(t.id()); }

  void check_same_tape(const T& t, const char* op) const {
    if (!t.defined() || t.tape() != this)
      throw std::invalid_argument(std::string(op) +
                                  ": tensor does not belong to this tape");
    if (consumed_)
      throw std::logic_error(std::string(op) + ": tape already consumed; reset first");
  }

  void check_binary(const T& a, const T& b, const char* op) const {
    check_same_tape(a, op);
    check_same_tape(b, op);
  }

  std::string op_shapes(const char* op, const T& a, const T& b) const {
    return std::string(op) + "(" + shape_str(av(a)) + ", " + shape_str(bv(b)) + ")";
  }

  void accumulate(std::vector<M>& grad, std::vector<char>& has, std::int64_t id,
                  M g) const {
    if (!nodes_[id].requires_grad) return;  // frozen leaves never receive entries
    if (!has[id]) {
      grad[id] = std::move(g);
      has[id]  = 1;
    } else {
      grad[id] += g;
    }
  }

  void step_backward(const Node& n, const M& gy, std::vector<M>& grad,
                     std::vector<char>& has) const {
    switch (n.kind) {
      case OpKind::matmul: {
        const M& a = nodes_[n.in[0]].value;
        const M& b = nodes_[n.in[1]].value;
        if (!n.trans_b) {
          accumulate(grad, has, n.in[0], gy * b.transpose());
          accumulate(grad, has, n.in[1], a.transpose() * gy);
        } else {  // y = a * b^T
          accumulate(grad, has, n.in[0], gy * b);
          accumulate(grad, has, n.in[1], gy.transpose() * a);
        }
        break;
      }
      case OpKind::add: {
        accumulate(grad, has, n.in[0], gy);
        if (n.bcast == Broadcast::same) {
          accumulate(grad, has, n.in[1], gy);
        } else {
          M gb(1, gy.cols());
          gb.row(0) = gy.colwise().sum();
          accumulate(grad, has, n.in[1], std::move(gb));
        }
        break;
      }
      case OpKind::mul: {
        const M& a = nodes_[n.in[0]].value;
        const M& b = nodes_[n.in[1]].value;
        switch (n.bcast) {
          case Broadcast::same:
            accumulate(grad, has, n.in[0], gy.cwiseProduct(b));
            accumulate(grad, has, n.in[1], gy.cwiseProduct(a));
            break;
          case Broadcast::scalar: {
            accumulate(grad, has, n.in[0], (gy.array() * b(0, 0)).matrix());
            M gb(1, 1);
            gb(0, 0) = gy.cwiseProduct(a).sum();
            accumulate(grad, has, n.in[1], std::move(gb));
            break;
          }
          case Broadcast::col: {
            M ga = gy;
            ga.array().colwise() *= b.col(0).array();
            accumulate(grad, has, n.in[0], std::move(ga));
            M gb(gy.rows(), 1);
            gb.col(0) = gy.cwiseProduct(a).rowwise().sum();
            accumulate(grad, has, n.in[1], std::move(gb));
            break;
          }
          default:
            break;
        }
        break;
      }
      case OpKind::relu:
        accumulate(grad, has, n.in[0], gy.cwiseProduct(n.sigma));
        break;
      case OpKind::softmax_rows: {
        const M& y = n.value;
        Eigen::Array<Scalar, Eigen::Dynamic, 1> dot =
            gy.cwiseProduct(y).rowwise().sum();
        M gz = gy;
        gz.array().colwise() -= dot;
        accumulate(grad, has, n.in[0], gz.cwiseProduct(y));
        break;
      }
      case OpKind::layernorm: {
        const M& xhat  = n.sigma;
        const M& gamma = nodes_[n.in[1]].value;
        if (nodes_[n.in[2]].requires_grad) {
          M gb(1, gy.cols());
          gb.row(0) = gy.colwise().sum();
          accumulate(grad, has, n.in[2], std::move(gb));
        }
        if (nodes_[n.in[1]].requires_grad) {
          M gg(1, gy.cols());
          gg.row(0) = gy.cwiseProduct(xhat).colwise().sum();
          accumulate(grad, has, n.in[1], std::move(gg));
        }
        if (nodes_[n.in[0]].requires_grad) {
          M gxhat = gy;
          gxhat.array().rowwise() *= gamma.row(0).array();
          using Arr = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
          Arr m1 = gxhat.rowwise().mean();
          Arr m2 = gxhat.cwiseProduct(xhat).rowwise().mean();
          M gx   = gxhat;
          gx.array().colwise() -= m1;
          M proj = xhat;
          proj.array().colwise() *= m2;
          gx -= proj;
          gx.array().colwise() *= n.aux.col(0).array();
          accumulate(grad, has, n.in[0], std::move(gx));
        }
        break;
      }
      case OpKind::conv1d_k3: {
        const M& x   = nodes_[n.in[0]].value;
        const M& w   = nodes_[n.in[1]].value;
        const Index rows = x.rows(), cin = x.cols();
        if (nodes_[n.in[2]].requires_grad) {
          M gb(1, gy.cols());
          gb.row(0) = gy.colwise().sum();
          accumulate(grad, has, n.in[2], std::move(gb));
        }
        if (nodes_[n.in[1]].requires_grad) {
          M gw = M::Zero(w.rows(), w.cols());
          for (int t = 0; t < 3; ++t) {
            const Index off = t - 1;
            const Index lo  = std::max<Index>(0, -off);
            const Index hi  = std::min<Index>(rows, rows - off);
            if (hi <= lo) continue;
            gw.middleRows(t * cin, cin) += x.middleRows(lo + off, hi - lo).transpose() *
                                           gy.middleRows(lo, hi - lo);
          }
          accumulate(grad, has, n.in[1], std::move(gw));
        }
        if (nodes_[n.in[0]].requires_grad) {
          M gx = M::Zero(rows, cin);
          for (int t = 0; t < 3; ++t) {
            const Index off = t - 1;
            const Index lo  = std::max<Index>(0, -off);
            const Index hi  = std::min<Index>(rows, rows - off);
            if (hi <= lo) continue;
            gx.middleRows(lo + off, hi - lo) +=
                gy.middleRows(lo, hi - lo) * w.middleRows(t * cin, cin).transpose();
          }
          accumulate(grad, has, n.in[0], std::move(gx));
        }
        break;
      }
      case OpKind::gap: {
        const Index rows = nodes_[n.in[0]].value.rows();
        M gx = (M::Ones(rows, 1) * gy) / Scalar(rows);
        accumulate(grad, has, n.in[0], std::move(gx));
        break;
      }
      case OpKind::mse_like: {
        const Scalar g = gy(0, 0);
        accumulate(grad, has, n.in[0], (n.owned_act.array() * (Scalar(2) * g)).matrix());
        accumulate(grad, has, n.in[1], (n.owned_act.array() * (Scalar(-2) * g)).matrix());
        break;
      }
      case OpKind::leaf:
        break;
    }
  }

  void release() {
    for (Node& n : nodes_) {
      n.saved.clear();
      n.saved.shrink_to_fit();
      n.sigma.resize(0, 0);
      n.aux.resize(0, 0);
      n.owned_act.resize(0, 0);
      if (n.kind != OpKind::leaf) n.value.resize(0, 0);
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::uint64_t, std::int64_t> param_nodes_;
  Segment segment_ = Segment::none;
  bool consumed_   = false;
};

template <typename Scalar>
const Mat<Scalar>& Tensor<Scalar>::value() const {
  if (!defined()) throw std::logic_error("Tensor::value: undefined tensor");
  return tape_->value(id_);
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  const Mat<Scalar>& v = value();
  if (v.rows() != 1 || v.cols() != 1)
    throw std::logic_error("Tensor::item: tensor is " + shape_str(v) + ", not scalar");
  return v(0, 0);
}

template <typename Scalar>
bool Tensor<Scalar>::requires_grad() const {
  if (!defined()) return false;
  return tape_->requires_grad(id_);
}

// RAII segment scope for attributing recorded buffers to model segments.
template <typename Scalar>
class SegmentScope {
 public:
  SegmentScope(Tape<Scalar>& tape, Segment s) : tape_(tape), prev_(tape.segment()) {
    tape_.set_segment(s);
  }
  ~SegmentScope() { tape_.set_segment(prev_); }
  SegmentScope(const SegmentScope&) = delete;
  SegmentScope& operator=(const SegmentScope&) = delete;

 private:
  Tape<Scalar>& tape_;
  Segment prev_;
};

}  // namespace mdpd
