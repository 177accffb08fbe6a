#pragma once

// Backpropagation-memory accountant. The analytic side prices training memory
// as |{a}| + |{sigma'}|: one saved activation and one derivative-state buffer
// per nonlinearity site (two layernorms, the attention softmax and the MLP
// relu per encoder layer). Freezing weights removes entries from {a} but never
// from {sigma'}, so head-and-norm tuning floors at half the full bill while a
// width-reduced side network scales the whole bill by 1/r. The empirical side
// replays real passes on the tape and compares per-segment censuses of what
// the engine actually retained.

#include <cstdint>
#include <stdexcept>
#include <string>

#include "mdpd/distill.hpp"
#include "mdpd/model.hpp"

namespace mdpd {

struct AnalyticMemoryReport {
  std::int64_t activations = 0;          // |{a}| over all encoder layers
  std::int64_t act_derivs = 0;           // |{sigma'}|, same sites
  std::int64_t full_ft = 0;              // activations + act_derivs
  std::int64_t petl_lower_bound = 0;     // (a + sigma') / 2: sigma' survives freezing
  std::int64_t side_network = 0;         // (a + sigma') / r, rounded to nearest
  std::int64_t attention_quadratic = 0;  // the tokens^2 share, which 1/r misses
  bool exact_division = true;            // false when r does not divide the bill
};

inline AnalyticMemoryReport analytic_memory(const ArchSpec& spec) {
  spec.validate();
  const std::int64_t n = spec.tokens;
  const std::int64_t d = spec.hidden;
  const std::int64_t per_layer = 2 * n * d + n * n + n * spec.mlp_ratio * d;
  AnalyticMemoryReport r;
  r.activations = spec.layers * per_layer;
  r.act_derivs = r.activations;
  r.full_ft = r.activations + r.act_derivs;
  r.petl_lower_bound = r.full_ft / 2;  // always exact: the bill is 2 |{a}|
  const std::int64_t div = spec.reduction;
  r.side_network = (r.full_ft + div / 2) / div;
  r.exact_division = (r.full_ft % div) == 0;
  r.attention_quadratic = spec.layers * n * n;
  return r;
}

// ----- flop counting ------------------------------------------------------------

// Multiply-accumulate pairs of the matmuls only (2 m n k each); element-wise
// work, pooling and the O(1) fusion gate are not counted. Loss-term
// arithmetic (alignment projectors, generation blocks) is training machinery
// outside the forward bill.
struct FlopReport {
  std::int64_t backbone_forward = 0;
  std::int64_t side_forward = 0;
  std::int64_t fusion_projections = 0;

  std::int64_t faded_total() const { return backbone_forward; }
  std::int64_t training_forward_total() const {
    return backbone_forward + side_forward + fusion_projections;
  }
};

inline std::int64_t encoder_layer_flops(std::int64_t n, std::int64_t d,
                                        std::int64_t mlp_ratio) {
  // q, k, v, out projections; q k^T; attention-value product; two MLP matmuls
  return 4 * (2 * n * d * d) + 2 * (2 * n * n * d) + 2 * (2 * n * d * mlp_ratio * d);
}

// The six weight matmuls alone (attention projections and MLP); the
// backbone/side ratio of this count is exactly r^2.
inline std::int64_t encoder_layer_weight_flops(std::int64_t n, std::int64_t d,
                                               std::int64_t mlp_ratio) {
  return 4 * (2 * n * d * d) + 2 * (2 * n * d * mlp_ratio * d);
}

inline FlopReport count_flops(const ArchSpec& spec) {
  spec.validate();
  const std::int64_t n = spec.tokens, d = spec.hidden, ds = spec.side_hidden();
  FlopReport r;
  r.backbone_forward = 2 * n * spec.input_dim * d +
                       spec.layers * encoder_layer_flops(n, d, spec.mlp_ratio) +
                       2 * d * spec.out_dim;
  r.side_forward = spec.layers * encoder_layer_flops(n, ds, spec.mlp_ratio) +
                   2 * ds * spec.out_dim;
  r.fusion_projections = spec.layers * 2 * n * d * ds;
  return r;
}

// ----- measured passes ----------------------------------------------------------

namespace detail {
template <typename S>
Mat<S> gaussian_mat(Index rows, Index cols, Rng& rng) {
  Mat<S> m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = static_cast<S>(rng.gaussian());
  return m;
}
}  // namespace detail

// Census of one recorded backbone pass, encoder layers only: pre-embedded
// constant tokens in, final features out, freeze flags per `mode`.
template <typename S>
MemoryLedger measure_backbone_pass(const ArchSpec& spec, std::uint64_t seed,
                                   TuneMode mode = TuneMode::full_ft) {
  if (mode != TuneMode::full_ft && mode != TuneMode::partial)
    throw std::invalid_argument(
        "measure_backbone_pass: mode must be full_ft or partial");
  auto bb = build_backbone<S>(spec, seed);
  apply_freeze<S>(bb, nullptr, nullptr, mode);
  Rng rng(derive_seed(seed, 0xacc0));
  Tape<S> tape;
  {
    SegmentScope<S> scope(tape, Segment::backbone);
    Tensor<S> x =
        tape.constant(detail::gaussian_mat<S>(spec.tokens, spec.hidden, rng));
    for (const auto& lay : bb.layers) x = encoder_layer_forward(tape, lay, x);
  }
  return tape.ledger_snapshot();
}

// Census of one recorded side pass: teacher features are produced without
// recording and enter the tape as constants, so the side segment holds exactly
// the side encoder layers' state.
template <typename S>
MemoryLedger measure_side_pass(const ArchSpec& spec, std::uint64_t seed) {
  auto bb = build_backbone<S>(spec, seed);
  auto side = build_side<S>(spec, derive_seed(seed, 1));
  apply_freeze<S>(bb, &side, nullptr, TuneMode::side_only);

  namespace kn = kernels;
  Rng rng(derive_seed(seed, 0xacc1));
  Mat<S> x = detail::gaussian_mat<S>(spec.tokens, spec.input_dim, rng);
  Mat<S> h = kn::add(kn::matmul(x, bb.w_emb.value, false), bb.b_emb.value,
                     Broadcast::row);
  Tape<S> tape;
  std::vector<Tensor<S>> feats;
  {
    SegmentScope<S> scope(tape, Segment::projector);
    for (const auto& lay : bb.layers) {
      h = encoder_layer_infer(lay, h);
      feats.push_back(tape.constant(h));
    }
  }
  (void)side_forward(tape, side, feats);
  return tape.ledger_snapshot();
}

// ----- reconciliation -----------------------------------------------------------

struct ReconcileResult {
  double ratio_empirical = 0.0;  // side census / full-tuning census
  double ratio_analytic = 0.0;   // side_network / full_ft from the report
  double gap = 0.0;
  double tol = 0.0;
  bool pass = false;
  std::int64_t side_stored = 0;
  std::int64_t backbone_stored = 0;
};

inline ReconcileResult reconcile(const MemoryLedger& side_pass,
                                 const MemoryLedger& full_pass,
                                 const AnalyticMemoryReport& report, double tol) {
  if (tol < 0.0) throw std::invalid_argument("reconcile: tolerance must be >= 0");
  ReconcileResult res;
  res.side_stored = side_pass.segment(Segment::side).total();
  res.backbone_stored = full_pass.segment(Segment::backbone).total();
  if (res.side_stored == 0)
    throw std::invalid_argument(
        "reconcile: side-pass ledger holds no side-segment state (segment tags "
        "missing?)");
  if (res.backbone_stored == 0)
    throw std::invalid_argument(
        "reconcile: full-pass ledger holds no backbone-segment state (segment "
        "tags missing?)");
  if (report.full_ft <= 0)
    throw std::invalid_argument("reconcile: analytic report is empty");
  res.ratio_empirical = static_cast<double>(res.side_stored) /
                        static_cast<double>(res.backbone_stored);
  res.ratio_analytic = static_cast<double>(report.side_network) /
                       static_cast<double>(report.full_ft);
  res.gap = std::abs(res.ratio_empirical - res.ratio_analytic);
  res.tol = tol;
  res.pass = res.gap <= tol;
  return res;
}

template <typename S>
ReconcileResult measure_and_reconcile(const ArchSpec& spec, std::uint64_t seed,
                                      double tol) {
  return reconcile(measure_side_pass<S>(spec, seed),
                   measure_backbone_pass<S>(spec, seed, TuneMode::full_ft),
                   analytic_memory(spec), tol);
}

}  // namespace mdpd
