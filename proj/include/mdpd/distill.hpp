#pragma once

// Dual-path distillation machinery: low-rank bottleneck projectors that align
// student features with teacher features, random token masking with a
// learnable mask token, a small convolutional generation block for the deep
// layers, and the combined training objective. Also the per-mode freeze
// policy, since it spans backbone, side network and this bank.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mdpd/model.hpp"

namespace mdpd {

// ----- bottleneck projector ----------------------------------------------------

template <typename S>
struct BottleneckProjector {
  Parameter<S> down;   // in_dim x rank
  Parameter<S> inner;  // 1 x rank
  Parameter<S> up;     // rank x out_dim
  Parameter<S> bias;   // 1 x out_dim

  static BottleneckProjector make(const std::string& prefix, int in_dim, int rank,
                                  int out_dim, Segment seg, Rng& rng,
                                  bool identity_init = false) {
    if (in_dim < 1 || rank < 1 || out_dim < 1)
      throw std::invalid_argument("BottleneckProjector: dims must be positive");
    BottleneckProjector p;
    Mat<S> d = identity_init ? init_identity_like<S>(in_dim, rank)
                             : init_uniform_fan_in<S>(in_dim, rank, in_dim, rng);
    Mat<S> u = identity_init ? init_identity_like<S>(rank, out_dim)
                             : init_uniform_fan_in<S>(rank, out_dim, rank, rng);
    p.down  = Parameter<S>(prefix + "down", std::move(d), true, seg);
    p.inner = Parameter<S>(prefix + "inner", init_zeros<S>(1, rank), false, seg);
    p.up    = Parameter<S>(prefix + "up", std::move(u), true, seg);
    p.bias  = Parameter<S>(prefix + "bias", init_zeros<S>(1, out_dim), false, seg);
    return p;
  }

  int in_dim() const { return static_cast<int>(down.value.rows()); }
  int rank() const { return static_cast<int>(down.value.cols()); }
  int out_dim() const { return static_cast<int>(up.value.cols()); }

  // (1 + in + out) * rank + out
  std::int64_t param_count() const {
    return down.size() + inner.size() + up.size() + bias.size();
  }

  std::vector<Parameter<S>*> all() { return {&down, &inner, &up, &bias}; }
};

template <typename S>
Tensor<S> bottleneck_project(Tape<S>& tape, const BottleneckProjector<S>& p,
                             const Tensor<S>& x) {
  if (x.cols() != p.down.value.rows())
    throw std::invalid_argument("bottleneck_project: input has " +
                                std::to_string(x.cols()) + " cols, projector expects " +
                                std::to_string(p.down.value.rows()));
  Tensor<S> z = add(matmul(x, use(tape, p.down)), use(tape, p.inner));
  return add(matmul(z, use(tape, p.up)), use(tape, p.bias));
}

// ----- token masks --------------------------------------------------------------

struct MaskVector {
  std::vector<double> m;  // one 0/1 entry per token
  double lambda = 0.0;

  Index size() const { return static_cast<Index>(m.size()); }
  Index masked_count() const {
    Index n = 0;
    for (double v : m) n += (v != 0.0);
    return n;
  }
  template <typename S>
  Mat<S> column() const {
    Mat<S> c(size(), 1);
    for (Index i = 0; i < size(); ++i) c(i, 0) = static_cast<S>(m[static_cast<std::size_t>(i)]);
    return c;
  }
  template <typename S>
  Mat<S> column_complement() const {
    Mat<S> c(size(), 1);
    for (Index i = 0; i < size(); ++i)
      c(i, 0) = S(1) - static_cast<S>(m[static_cast<std::size_t>(i)]);
    return c;
  }
};

inline MaskVector mask_from_uniforms(const std::vector<double>& r, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw std::invalid_argument("mask ratio must lie in [0, 1], got " +
                                std::to_string(lambda));
  MaskVector mv;
  mv.lambda = lambda;
  mv.m.reserve(r.size());
  for (double u : r) mv.m.push_back(u < lambda ? 1.0 : 0.0);
  return mv;
}

inline MaskVector sample_mask(Index tokens, double lambda, Rng& rng) {
  if (tokens < 1) throw std::invalid_argument("sample_mask: need at least one token");
  std::vector<double> u(static_cast<std::size_t>(tokens));
  for (auto& x : u) x = rng.uniform01();
  return mask_from_uniforms(u, lambda);
}

// Replace masked rows of an aligned feature map with the learnable mask token;
// unmasked rows pass through bit-identically (multiplying by exact 1 and 0).
template <typename S>
Tensor<S> apply_mask(Tape<S>& tape, const Tensor<S>& aligned, const MaskVector& mask,
                     const Parameter<S>& mask_token) {
  if (mask.size() != aligned.rows())
    throw std::invalid_argument("apply_mask: mask has " + std::to_string(mask.size()) +
                                " entries for " + std::to_string(aligned.rows()) +
                                " rows");
  if (mask_token.value.cols() != aligned.cols())
    throw std::invalid_argument("apply_mask: mask token dim " +
                                std::to_string(mask_token.value.cols()) +
                                " != feature dim " + std::to_string(aligned.cols()));
  Tensor<S> keep = tape.constant(mask.template column_complement<S>());
  Tensor<S> fill = matmul(tape.constant(mask.template column<S>()),
                          use(tape, mask_token));
  return add(mul(aligned, keep), fill);
}

// ----- generation block ---------------------------------------------------------

template <typename S>
struct GenerationBlock {
  Parameter<S> w1, b1, w2, b2;  // two width-3 convs over the token axis

  static GenerationBlock make(const std::string& prefix, int dim, Segment seg,
                              Rng& rng, bool identity_init = false) {
    GenerationBlock g;
    Mat<S> w1 = init_uniform_fan_in<S>(3 * dim, dim, 3 * dim, rng);
    Mat<S> w2 = init_uniform_fan_in<S>(3 * dim, dim, 3 * dim, rng);
    if (identity_init) {
      // center tap = identity, other taps zero: the block is relu-then-copy
      w1 = init_zeros<S>(3 * dim, dim);
      w2 = init_zeros<S>(3 * dim, dim);
      w1.block(dim, 0, dim, dim) = Mat<S>::Identity(dim, dim);
      w2.block(dim, 0, dim, dim) = Mat<S>::Identity(dim, dim);
    }
    g.w1 = Parameter<S>(prefix + "conv1.w", std::move(w1), true, seg);
    g.b1 = Parameter<S>(prefix + "conv1.b", init_zeros<S>(1, dim), false, seg);
    g.w2 = Parameter<S>(prefix + "conv2.w", std::move(w2), true, seg);
    g.b2 = Parameter<S>(prefix + "conv2.b", init_zeros<S>(1, dim), false, seg);
    return g;
  }

  std::vector<Parameter<S>*> all() { return {&w1, &b1, &w2, &b2}; }
};

template <typename S>
Tensor<S> generate(Tape<S>& tape, const GenerationBlock<S>& g, const Tensor<S>& x) {
  return conv1d_k3(relu(conv1d_k3(x, use(tape, g.w1), use(tape, g.b1))),
                   use(tape, g.w2), use(tape, g.b2));
}

// ----- losses -------------------------------------------------------------------

namespace detail {
template <typename S>
void require_detached(const Tensor<S>& t, const char* what) {
  if (t.requires_grad())
    throw std::invalid_argument(std::string(what) + " must be detached");
}
}  // namespace detail

// || b - phi(s) ||^2, teacher fixed
template <typename S>
Tensor<S> loss_shallow(Tape<S>& tape, const Tensor<S>& teacher,
                       const BottleneckProjector<S>& proj, const Tensor<S>& student) {
  detail::require_detached(teacher, "loss_shallow: teacher features");
  return mse_like(bottleneck_project(tape, proj, student), teacher);
}

// masked rows only: || m . (b - G(sbar)) ||^2 with sbar the aligned student
// features whose masked rows were replaced by the mask token
template <typename S>
Tensor<S> loss_deep(Tape<S>& tape, const Tensor<S>& teacher,
                    const BottleneckProjector<S>& proj, const Tensor<S>& student,
                    const MaskVector& mask, const Parameter<S>& mask_token,
                    const GenerationBlock<S>& gen) {
  detail::require_detached(teacher, "loss_deep: teacher features");
  Tensor<S> sbar = apply_mask(tape, bottleneck_project(tape, proj, student), mask,
                              mask_token);
  Tensor<S> diff = sub(teacher, generate(tape, gen, sbar));
  Tensor<S> sel = mul(diff, tape.constant(mask.template column<S>()));
  return mse_like(sel, tape.constant(init_zeros<S>(diff.rows(), diff.cols())));
}

// || y_s - phi(y_b) ||^2: the student logits are the target, only the
// backbone head (through phi) learns from this term
template <typename S>
Tensor<S> loss_logits(Tape<S>& tape, const Tensor<S>& y_backbone,
                      const Tensor<S>& y_side_detached,
                      const BottleneckProjector<S>& proj) {
  detail::require_detached(y_side_detached, "loss_logits: side logits");
  return mse_like(bottleneck_project(tape, proj, y_backbone), y_side_detached);
}

// ----- configuration and bank ---------------------------------------------------

enum class LayerSubset { all, shallow_only, deep_only };

inline const char* to_string(LayerSubset s) {
  switch (s) {
    case LayerSubset::all: return "all";
    case LayerSubset::shallow_only: return "shallow_only";
    case LayerSubset::deep_only: return "deep_only";
  }
  return "?";
}

struct DistillConfig {
  double lambda = 0.5;  // token mask ratio
  int rank      = 8;    // bottleneck width d
  double w_sft  = 1.0;
  double w_log  = 1e-4;
  double w_deep = 6e-5;
  double w_sha  = 4e-5;
  LayerSubset subset = LayerSubset::all;
  bool generation = true;        // ablation: replace deep loss by plain alignment
  bool task_on_backbone = false; // extra task term on backbone logits

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0))
      throw std::invalid_argument("distill.lambda must lie in [0, 1]");
    if (rank < 1) throw std::invalid_argument("distill.rank must be >= 1");
    if (w_sft < 0 || w_log < 0 || w_deep < 0 || w_sha < 0)
      throw std::invalid_argument("distill weights must be >= 0");
  }
};

template <typename S>
struct DistillBank {
  std::vector<BottleneckProjector<S>> feat_projs;  // one per layer, D_S -> D_B
  std::vector<Parameter<S>> mask_tokens;           // deep layers only, 1 x D_B
  std::vector<GenerationBlock<S>> gens;            // deep layers only
  BottleneckProjector<S> logit_proj;               // out_dim -> out_dim

  std::vector<Parameter<S>*> side_group() {
    std::vector<Parameter<S>*> out;
    for (auto& p : feat_projs)
      for (auto* q : p.all()) out.push_back(q);
    for (auto& t : mask_tokens) out.push_back(&t);
    for (auto& g : gens)
      for (auto* q : g.all()) out.push_back(q);
    return out;
  }
  std::vector<Parameter<S>*> backbone_group() {
    std::vector<Parameter<S>*> out;
    for (auto* q : logit_proj.all()) out.push_back(q);
    return out;
  }
  std::vector<Parameter<S>*> params() {
    auto out = side_group();
    for (auto* q : backbone_group()) out.push_back(q);
    return out;
  }
};

template <typename S>
DistillBank<S> build_distill_bank(const ArchSpec& spec, const DistillConfig& cfg,
                                  std::uint64_t seed) {
  spec.validate();
  cfg.validate();
  Rng rng(derive_seed(seed, 0xd157));
  DistillBank<S> bank;
  const int ds = spec.side_hidden();
  for (int l = 0; l < spec.layers; ++l)
    bank.feat_projs.push_back(BottleneckProjector<S>::make(
        "distill.proj" + std::to_string(l) + ".", ds, cfg.rank, spec.hidden,
        Segment::projector, rng));
  for (int l = spec.shallow_count(); l < spec.layers; ++l) {
    bank.mask_tokens.emplace_back("distill.mask_token" + std::to_string(l),
                                  init_zeros<S>(1, spec.hidden), false,
                                  Segment::projector);
    bank.gens.push_back(GenerationBlock<S>::make(
        "distill.gen" + std::to_string(l) + ".", spec.hidden, Segment::projector, rng));
  }
  // identity passthrough at start: the aligned backbone logits begin as the
  // raw backbone logits, so fading is meaningful from step one
  bank.logit_proj = BottleneckProjector<S>::make(
      "distill.logit.", spec.out_dim, std::min(cfg.rank, spec.out_dim), spec.out_dim,
      Segment::projector, rng, /*identity_init=*/true);
  return bank;
}

// ----- combined objective -------------------------------------------------------

struct LossBreakdown {
  double sft = 0.0;
  double log = 0.0;
  std::vector<double> sha;   // per active shallow layer
  std::vector<double> deep;  // per active deep layer
  double total = 0.0;

  double sha_sum() const {
    double s = 0.0;
    for (double v : sha) s += v;
    return s;
  }
  double deep_sum() const {
    double s = 0.0;
    for (double v : deep) s += v;
    return s;
  }
};

// shared by producer and tests so the identity `total == weighted parts` is a
// bitwise statement about one expression, not two compilations of it
inline double weighted_total(const DistillConfig& cfg, double sft, double logv,
                             double sha_sum, double deep_sum) {
  return cfg.w_sft * sft + cfg.w_log * logv + cfg.w_sha * sha_sum +
         cfg.w_deep * deep_sum;
}

template <typename S>
struct ObjectiveNodes {
  Tensor<S> total;  // scalar node, ready for backward
  LossBreakdown values;
};

// One training item mid-assembly: the task loss node plus the four tensors the
// distillation terms need.
template <typename S>
struct ItemTrace {
  Tensor<S> task;                       // scalar, already on the student head
  std::vector<Tensor<S>> feats_teacher; // detached backbone features
  std::vector<Tensor<S>> feats_student; // live side features
  Tensor<S> y_backbone;                 // live backbone logits
  Tensor<S> y_side;                     // live side logits
};

template <typename S>
ObjectiveNodes<S> combined_objective(Tape<S>& tape, const std::vector<ItemTrace<S>>& items,
                                     DistillBank<S>& bank, const DistillConfig& cfg,
                                     const ArchSpec& spec, const MaskVector& mask) {
  cfg.validate();
  if (items.empty()) throw std::invalid_argument("combined_objective: empty batch");
  const int L = spec.layers;
  const int boundary = spec.shallow_count();
  const bool use_sha = cfg.subset != LayerSubset::deep_only;
  const bool use_deep = cfg.subset != LayerSubset::shallow_only;
  const S inv_b = S(1) / static_cast<S>(items.size());

  SegmentScope<S> scope(tape, Segment::projector);

  std::vector<Tensor<S>> task_terms, log_terms;
  std::vector<std::vector<Tensor<S>>> sha_terms(static_cast<std::size_t>(boundary));
  std::vector<std::vector<Tensor<S>>> deep_terms(static_cast<std::size_t>(L - boundary));

  for (const auto& it : items) {
    if (it.feats_teacher.size() != static_cast<std::size_t>(L) ||
        it.feats_student.size() != static_cast<std::size_t>(L))
      throw std::invalid_argument("combined_objective: need one feature map per layer");
    task_terms.push_back(it.task);
    log_terms.push_back(loss_logits(tape, it.y_backbone, detach(it.y_side),
                                    bank.logit_proj));
    if (use_sha)
      for (int l = 0; l < boundary; ++l)
        sha_terms[static_cast<std::size_t>(l)].push_back(
            loss_shallow(tape, it.feats_teacher[static_cast<std::size_t>(l)],
                         bank.feat_projs[static_cast<std::size_t>(l)],
                         it.feats_student[static_cast<std::size_t>(l)]));
    if (use_deep)
      for (int l = boundary; l < L; ++l) {
        const std::size_t li = static_cast<std::size_t>(l);
        const std::size_t di = static_cast<std::size_t>(l - boundary);
        deep_terms[di].push_back(
            cfg.generation
                ? loss_deep(tape, it.feats_teacher[li], bank.feat_projs[li],
                            it.feats_student[li], mask, bank.mask_tokens[di],
                            bank.gens[di])
                : loss_shallow(tape, it.feats_teacher[li], bank.feat_projs[li],
                               it.feats_student[li]));
      }
  }

  auto mean_of = [&](const std::vector<Tensor<S>>& terms) {
    return scale(sum_of(terms), inv_b);
  };

  ObjectiveNodes<S> out;
  Tensor<S> sft_n = mean_of(task_terms);
  Tensor<S> log_n = mean_of(log_terms);
  out.values.sft = static_cast<double>(sft_n.item());
  out.values.log = static_cast<double>(log_n.item());

  Tensor<S> total = add(scale(sft_n, static_cast<S>(cfg.w_sft)),
                        scale(log_n, static_cast<S>(cfg.w_log)));
  if (use_sha && boundary > 0) {
    std::vector<Tensor<S>> per_layer;
    for (auto& terms : sha_terms) {
      Tensor<S> ln = mean_of(terms);
      out.values.sha.push_back(static_cast<double>(ln.item()));
      per_layer.push_back(ln);
    }
    total = add(total, scale(sum_of(per_layer), static_cast<S>(cfg.w_sha)));
  }
  if (use_deep && L - boundary > 0) {
    std::vector<Tensor<S>> per_layer;
    for (auto& terms : deep_terms) {
      Tensor<S> ln = mean_of(terms);
      out.values.deep.push_back(static_cast<double>(ln.item()));
      per_layer.push_back(ln);
    }
    total = add(total, scale(sum_of(per_layer), static_cast<S>(cfg.w_deep)));
  }
  out.total = total;
  out.values.total = weighted_total(cfg, out.values.sft, out.values.log,
                                    out.values.sha_sum(), out.values.deep_sum());
  return out;
}

// ----- freeze policy ------------------------------------------------------------

enum class TuneMode { mdpd, full_ft, partial, side_only };

inline const char* to_string(TuneMode m) {
  switch (m) {
    case TuneMode::mdpd: return "mdpd";
    case TuneMode::full_ft: return "full_ft";
    case TuneMode::partial: return "partial";
    case TuneMode::side_only: return "side_only";
  }
  return "?";
}

inline TuneMode tune_mode_from_string(const std::string& s) {
  if (s == "mdpd") return TuneMode::mdpd;
  if (s == "full_ft") return TuneMode::full_ft;
  if (s == "partial") return TuneMode::partial;
  if (s == "side_only") return TuneMode::side_only;
  throw std::invalid_argument("unknown tuning mode '" + s +
                              "' (expected mdpd, full_ft, partial or side_only)");
}

inline bool mode_uses_side(TuneMode m) {
  return m == TuneMode::mdpd || m == TuneMode::side_only;
}
inline bool mode_uses_distill(TuneMode m) { return m == TuneMode::mdpd; }

template <typename S>
void apply_freeze(BackboneModel<S>& backbone, SideModel<S>* side,
                  DistillBank<S>* bank, TuneMode mode) {
  auto set_all = [](const std::vector<Parameter<S>*>& ps, bool flag) {
    for (auto* p : ps) p->trainable = flag;
  };
  switch (mode) {
    case TuneMode::full_ft:
      set_all(backbone.params(), true);
      if (side) set_all(side->params(), false);
      if (bank) set_all(bank->params(), false);
      break;
    case TuneMode::partial: {
      set_all(backbone.params(), false);
      for (auto& lay : backbone.layers) set_all(lay.norms(), true);
      backbone.w_head.trainable = true;
      if (side) set_all(side->params(), false);
      if (bank) set_all(bank->params(), false);
      break;
    }
    case TuneMode::side_only:
      set_all(backbone.params(), false);
      if (!side)
        throw std::invalid_argument("side_only tuning needs a side network");
      set_all(side->params(), true);
      if (bank) set_all(bank->params(), false);
      break;
    case TuneMode::mdpd: {
      if (!side || !bank)
        throw std::invalid_argument("mdpd tuning needs a side network and distill bank");
      set_all(backbone.params(), false);
      for (auto& lay : backbone.layers) set_all(lay.norms(), true);
      backbone.w_head.trainable = true;
      set_all(side->params(), true);
      set_all(bank->side_group(), true);
      set_all(bank->backbone_group(), true);
      break;
    }
  }
}

template <typename S>
std::vector<Parameter<S>*> trainable_params(BackboneModel<S>& backbone,
                                            SideModel<S>* side, DistillBank<S>* bank) {
  std::vector<Parameter<S>*> out;
  auto take = [&](const std::vector<Parameter<S>*>& ps) {
    for (auto* p : ps)
      if (p->trainable) out.push_back(p);
  };
  take(backbone.params());
  if (side) take(side->params());
  if (bank) take(bank->params());
  return out;
}

}  // namespace mdpd
