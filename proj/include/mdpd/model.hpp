#pragma once

// Backbone and side networks. Both are stacks of the same pre-norm encoder
// layer (layernorm -> single-head attention -> residual -> layernorm -> relu
// MLP -> residual); the side stack runs at hidden/reduction width and is fed
// per-layer fusions of backbone features instead of an embedding. The faded
// path drops everything but the backbone and reuses the same kernels, so its
// outputs are bit-identical to the recorded student pass.

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdpd/ops.hpp"
#include "mdpd/params.hpp"
#include "mdpd/rng.hpp"

namespace mdpd {

struct ArchSpec {
  int layers    = 4;   // encoder depth L, shared by backbone and side
  int tokens    = 16;  // N
  int hidden    = 64;  // backbone width D_B
  int reduction = 2;   // side width divisor r
  int out_dim   = 4;   // head output dim (classes)
  int mlp_ratio = 4;
  int input_dim = 8;

  int side_hidden() const { return hidden / reduction; }
  // layers 1..shallow_count are shallow, the rest are deep
  int shallow_count() const { return layers / 2; }

  void validate() const {
    if (layers < 2) throw std::invalid_argument("ArchSpec: layers must be >= 2");
    if (tokens < 4) throw std::invalid_argument("ArchSpec: tokens must be >= 4");
    if (hidden < 2) throw std::invalid_argument("ArchSpec: hidden must be >= 2");
    // r = 1 is degenerate (side as wide as the backbone) but accepted for
    // memory diagnostics; the interesting regime is r >= 2
    if (reduction < 1) throw std::invalid_argument("ArchSpec: reduction must be >= 1");
    if (hidden % reduction != 0)
      throw std::invalid_argument("ArchSpec: hidden (" + std::to_string(hidden) +
                                  ") not divisible by reduction (" +
                                  std::to_string(reduction) + ")");
    if (out_dim < 2) throw std::invalid_argument("ArchSpec: out_dim must be >= 2");
    if (mlp_ratio < 1) throw std::invalid_argument("ArchSpec: mlp_ratio must be >= 1");
    if (input_dim < 1) throw std::invalid_argument("ArchSpec: input_dim must be >= 1");
  }
};

template <typename S>
struct EncoderLayer {
  int width = 0;
  Parameter<S> ln1_g, ln1_b;
  Parameter<S> wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter<S> ln2_g, ln2_b;
  Parameter<S> w1, b1, w2, b2;

  static EncoderLayer make(const std::string& prefix, int width, int mlp_ratio,
                           Segment seg, Rng& rng) {
    EncoderLayer lay;
    lay.width  = width;
    const int h = width * mlp_ratio;
    auto w = [&](const char* n, Index r, Index c) {
      return Parameter<S>(prefix + n, init_uniform_fan_in<S>(r, c, r, rng), true, seg);
    };
    auto b = [&](const char* n, Index c) {
      return Parameter<S>(prefix + n, init_zeros<S>(1, c), false, seg);
    };
    lay.ln1_g = Parameter<S>(prefix + "ln1.g", init_ones<S>(1, width), false, seg);
    lay.ln1_b = b("ln1.b", width);
    lay.wq = w("attn.wq", width, width); lay.bq = b("attn.bq", width);
    lay.wk = w("attn.wk", width, width); lay.bk = b("attn.bk", width);
    lay.wv = w("attn.wv", width, width); lay.bv = b("attn.bv", width);
    lay.wo = w("attn.wo", width, width); lay.bo = b("attn.bo", width);
    lay.ln2_g = Parameter<S>(prefix + "ln2.g", init_ones<S>(1, width), false, seg);
    lay.ln2_b = b("ln2.b", width);
    lay.w1 = w("mlp.w1", width, h); lay.b1 = b("mlp.b1", h);
    lay.w2 = w("mlp.w2", h, width); lay.b2 = b("mlp.b2", width);
    return lay;
  }

  std::vector<Parameter<S>*> all() {
    return {&ln1_g, &ln1_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo,
            &ln2_g, &ln2_b, &w1, &b1, &w2, &b2};
  }
  std::vector<Parameter<S>*> norms() { return {&ln1_g, &ln1_b, &ln2_g, &ln2_b}; }

  // scalars held in the six weight matmuls; the side/backbone ratio of this
  // count is exactly 1/r^2
  std::int64_t weight_matmul_scalars() const {
    return wq.size() + wk.size() + wv.size() + wo.size() + w1.size() + w2.size();
  }
};

template <typename S>
Tensor<S> encoder_layer_forward(Tape<S>& tape, const EncoderLayer<S>& lay,
                                const Tensor<S>& x) {
  Tensor<S> h = layernorm(x, use(tape, lay.ln1_g), use(tape, lay.ln1_b));
  Tensor<S> q = linear(h, use(tape, lay.wq), use(tape, lay.bq));
  Tensor<S> k = linear(h, use(tape, lay.wk), use(tape, lay.bk));
  Tensor<S> v = linear(h, use(tape, lay.wv), use(tape, lay.bv));
  Tensor<S> att = softmax_rows(scale(matmul_nt(q, k),
                                     S(1) / std::sqrt(static_cast<S>(lay.width))));
  Tensor<S> ctx = linear(matmul(att, v), use(tape, lay.wo), use(tape, lay.bo));
  Tensor<S> x2 = add(x, ctx);
  Tensor<S> h2 = layernorm(x2, use(tape, lay.ln2_g), use(tape, lay.ln2_b));
  Tensor<S> m = linear(relu(linear(h2, use(tape, lay.w1), use(tape, lay.b1))),
                       use(tape, lay.w2), use(tape, lay.b2));
  return add(x2, m);
}

// Same arithmetic without recording; kernels shared with the tape path.
template <typename S>
Mat<S> encoder_layer_infer(const EncoderLayer<S>& lay, const Mat<S>& x) {
  namespace kn = kernels;
  const S eps = Tape<S>::default_ln_eps();
  Mat<S> h = kn::layernorm(x, lay.ln1_g.value, lay.ln1_b.value, eps);
  Mat<S> q = kn::add(kn::matmul(h, lay.wq.value, false), lay.bq.value, Broadcast::row);
  Mat<S> k = kn::add(kn::matmul(h, lay.wk.value, false), lay.bk.value, Broadcast::row);
  Mat<S> v = kn::add(kn::matmul(h, lay.wv.value, false), lay.bv.value, Broadcast::row);
  Mat<S> c(1, 1);
  c(0, 0) = S(1) / std::sqrt(static_cast<S>(lay.width));
  Mat<S> att = kn::softmax_rows(Mat<S>(kn::mul(kn::matmul(q, k, true), c, Broadcast::scalar)));
  Mat<S> ctx = kn::add(kn::matmul(Mat<S>(kn::matmul(att, v, false)), lay.wo.value, false),
                       lay.bo.value, Broadcast::row);
  Mat<S> x2 = kn::add(x, ctx, Broadcast::same);
  Mat<S> h2 = kn::layernorm(x2, lay.ln2_g.value, lay.ln2_b.value, eps);
  Mat<S> m1 = kn::relu(Mat<S>(
      kn::add(kn::matmul(h2, lay.w1.value, false), lay.b1.value, Broadcast::row)));
  Mat<S> m2 = kn::add(kn::matmul(m1, lay.w2.value, false), lay.b2.value, Broadcast::row);
  return kn::add(x2, m2, Broadcast::same);
}

// ----- backbone ---------------------------------------------------------------

template <typename S>
struct BackboneModel {
  ArchSpec spec;
  Parameter<S> w_emb, b_emb;
  std::vector<EncoderLayer<S>> layers;
  Parameter<S> w_head;  // task head on pooled final features

  std::vector<Parameter<S>*> params() {
    std::vector<Parameter<S>*> out = {&w_emb, &b_emb};
    for (auto& l : layers)
      for (auto* p : l.all()) out.push_back(p);
    out.push_back(&w_head);
    return out;
  }

  // everything that must stay untouched under partial tuning or distillation
  std::vector<Parameter<S>*> frozen_under_mdpd() {
    std::vector<Parameter<S>*> out = {&w_emb, &b_emb};
    for (auto& l : layers) {
      out.insert(out.end(), {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo,
                             &l.bo, &l.w1, &l.b1, &l.w2, &l.b2});
    }
    return out;
  }
};

template <typename S>
BackboneModel<S> build_backbone(const ArchSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, 0x00b0));
  BackboneModel<S> m;
  m.spec  = spec;
  m.w_emb = Parameter<S>("backbone.embed.w",
                         init_uniform_fan_in<S>(spec.input_dim, spec.hidden,
                                                spec.input_dim, rng),
                         true, Segment::backbone);
  m.b_emb = Parameter<S>("backbone.embed.b", init_zeros<S>(1, spec.hidden), false,
                         Segment::backbone);
  for (int l = 0; l < spec.layers; ++l)
    m.layers.push_back(EncoderLayer<S>::make(
        "backbone.layer" + std::to_string(l) + ".", spec.hidden, spec.mlp_ratio,
        Segment::backbone, rng));
  m.w_head = Parameter<S>("backbone.head.w",
                          init_uniform_fan_in<S>(spec.hidden, spec.out_dim,
                                                 spec.hidden, rng),
                          true, Segment::head);
  return m;
}

template <typename S>
struct BackboneTrace {
  std::vector<Tensor<S>> feats;  // b^1..b^L, each tokens x hidden
  Tensor<S> logits;              // 1 x out_dim
};

template <typename S>
BackboneTrace<S> backbone_forward(Tape<S>& tape, const BackboneModel<S>& m,
                                  const Mat<S>& x_tokens) {
  if (x_tokens.rows() != m.spec.tokens || x_tokens.cols() != m.spec.input_dim)
    throw std::invalid_argument("backbone_forward: input is " + shape_str(x_tokens) +
                                ", expected " +
                                shape_str(m.spec.tokens, m.spec.input_dim));
  BackboneTrace<S> tr;
  {
    SegmentScope<S> scope(tape, Segment::backbone);
    Tensor<S> x = linear(tape.constant(x_tokens), use(tape, m.w_emb), use(tape, m.b_emb));
    for (const auto& lay : m.layers) {
      x = encoder_layer_forward(tape, lay, x);
      tr.feats.push_back(x);
    }
  }
  {
    SegmentScope<S> scope(tape, Segment::head);
    tr.logits = matmul(gap(tr.feats.back()), use(tape, m.w_head));
  }
  return tr;
}

// Inference with the side branch faded away: backbone and task head only,
// no tape, no side parameters anywhere in sight.
template <typename S>
Mat<S> faded_forward(const BackboneModel<S>& m, const Mat<S>& x_tokens) {
  if (x_tokens.rows() != m.spec.tokens || x_tokens.cols() != m.spec.input_dim)
    throw std::invalid_argument("faded_forward: input is " + shape_str(x_tokens) +
                                ", expected " +
                                shape_str(m.spec.tokens, m.spec.input_dim));
  namespace kn = kernels;
  Mat<S> x = kn::add(kn::matmul(x_tokens, m.w_emb.value, false), m.b_emb.value,
                     Broadcast::row);
  for (const auto& lay : m.layers) x = encoder_layer_infer(lay, x);
  return kn::matmul(Mat<S>(kn::gap(x)), m.w_head.value, false);
}

// ----- side network -----------------------------------------------------------

template <typename S>
struct SideModel {
  ArchSpec spec;
  std::vector<EncoderLayer<S>> layers;  // width hidden/reduction
  std::vector<Parameter<S>> alphas;     // per-layer fusion gates, scalar
  std::vector<Parameter<S>> projs;      // per-layer down-projections D_B -> D_S
  Parameter<S> w_head;                  // side task head

  std::vector<Parameter<S>*> params() {
    std::vector<Parameter<S>*> out;
    for (auto& l : layers)
      for (auto* p : l.all()) out.push_back(p);
    for (auto& a : alphas) out.push_back(&a);
    for (auto& p : projs) out.push_back(&p);
    out.push_back(&w_head);
    return out;
  }
};

template <typename S>
SideModel<S> build_side(const ArchSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, 0x51de));
  SideModel<S> m;
  m.spec = spec;
  const int ds = spec.side_hidden();
  for (int l = 0; l < spec.layers; ++l) {
    m.layers.push_back(EncoderLayer<S>::make(
        "side.layer" + std::to_string(l) + ".", ds, spec.mlp_ratio, Segment::side, rng));
    m.alphas.emplace_back("side.fuse" + std::to_string(l) + ".alpha",
                          init_zeros<S>(1, 1), false, Segment::projector);
    m.projs.emplace_back("side.fuse" + std::to_string(l) + ".proj",
                         init_uniform_fan_in<S>(spec.hidden, ds, spec.hidden, rng),
                         true, Segment::projector);
  }
  m.w_head = Parameter<S>("side.head.w",
                          init_uniform_fan_in<S>(ds, spec.out_dim, ds, rng), true,
                          Segment::head);
  return m;
}

// z_l = P_l( sigmoid(alpha_l) b^l + (1 - sigmoid(alpha_l)) b^L )
template <typename S>
Tensor<S> fuse_inputs(Tape<S>& tape, const Tensor<S>& b_l, const Tensor<S>& b_last,
                      const Parameter<S>& alpha, const Parameter<S>& proj) {
  if (b_l.rows() != b_last.rows() || b_l.cols() != b_last.cols())
    throw std::invalid_argument("fuse_inputs: feature shapes differ: " +
                                shape_str(b_l.value()) + " vs " +
                                shape_str(b_last.value()));
  SegmentScope<S> scope(tape, Segment::projector);
  auto [g, gc] = gate_pair(use(tape, alpha));
  Tensor<S> mixed = add(mul(b_l, g), mul(b_last, gc));
  return matmul(mixed, use(tape, proj));
}

template <typename S>
struct SideTrace {
  std::vector<Tensor<S>> feats;  // s^1..s^L, each tokens x side_hidden
  Tensor<S> logits;              // 1 x out_dim
};

template <typename S>
SideTrace<S> side_forward(Tape<S>& tape, const SideModel<S>& m,
                          const std::vector<Tensor<S>>& backbone_feats) {
  if (backbone_feats.size() != static_cast<std::size_t>(m.spec.layers))
    throw std::invalid_argument("side_forward: expected " +
                                std::to_string(m.spec.layers) + " feature maps, got " +
                                std::to_string(backbone_feats.size()));
  for (const auto& f : backbone_feats)
    if (f.requires_grad())
      throw std::invalid_argument(
          "side_forward: backbone features must be detached constants");

  SideTrace<S> tr;
  Tensor<S> s;  // s^0 = 0: the first layer sees the fusion alone
  for (int l = 0; l < m.spec.layers; ++l) {
    Tensor<S> fused = fuse_inputs(tape, backbone_feats[l], backbone_feats.back(),
                                  m.alphas[l], m.projs[l]);
    SegmentScope<S> scope(tape, Segment::side);
    Tensor<S> input = s.defined() ? add(s, fused) : fused;
    s = encoder_layer_forward(tape, m.layers[l], input);
    tr.feats.push_back(s);
  }
  {
    SegmentScope<S> scope(tape, Segment::head);
    tr.logits = matmul(gap(tr.feats.back()), use(tape, m.w_head));
  }
  return tr;
}

}  // namespace mdpd
