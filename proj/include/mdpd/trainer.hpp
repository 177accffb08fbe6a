#pragma once

// Single-step training driver: one tape per step, simultaneous update of every
// melted parameter. Teacher features are detached before the side network and
// the distillation terms see them, so each loss term reaches exactly the
// parameter groups the routing rules allow.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdpd/distill.hpp"
#include "mdpd/memory_model.hpp"
#include "mdpd/optimizer.hpp"

namespace mdpd {

struct TrainHyper {
  OptimConfig optim;
  SchedKind schedule = SchedKind::linear;
  double warmup_frac = 0.1;
  double base_lr = 3e-3;
  std::int64_t total_steps = 200;

  void validate() const {
    optim.validate();
    if (total_steps <= 0)
      throw std::invalid_argument("train.steps must be positive");
    if (base_lr < 0.0) throw std::invalid_argument("train.lr must be >= 0");
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0))
      throw std::invalid_argument("train.warmup_frac must lie in [0, 1)");
  }
};

struct TrainStepResult {
  LossBreakdown losses;
  double lr = 0.0;
};

template <typename S>
struct AssembledObjective {
  Tensor<S> total;  // scalar node on the caller's tape
  LossBreakdown values;
};

// The values that cross the stop-gradient boundary: detached teacher feature
// maps and the detached logits-distillation target. A finite-difference
// evaluation of the objective must hold these fixed while parameters move —
// the backward pass treats them as constants, so an evaluator that recomputed
// them would measure derivative paths the training step deliberately drops.
template <typename S>
struct BoundaryPin {
  std::vector<std::vector<Mat<S>>> feats;  // [item][layer]
  std::vector<Mat<S>> y_side;              // [item]
};

// Record the boundary values at the current parameter point. Uses the exact
// recorded-forward kernels, so the pinned constants are bit-identical to what
// a live assembly would detach.
template <typename S>
BoundaryPin<S> capture_boundary(BackboneModel<S>& bb, SideModel<S>& side,
                                const std::vector<Mat<S>>& xs) {
  BoundaryPin<S> pin;
  for (const Mat<S>& x : xs) {
    Tape<S> tape;
    auto btr = backbone_forward(tape, bb, x);
    std::vector<Tensor<S>> det;
    for (auto& f : btr.feats) det.push_back(detach(f));
    auto str = side_forward(tape, side, det);
    std::vector<Mat<S>> feats;
    feats.reserve(det.size());
    for (auto& f : det) feats.push_back(f.value());
    pin.feats.push_back(std::move(feats));
    pin.y_side.push_back(str.logits.value());
  }
  return pin;
}

// Build the full training objective for one batch on the given tape: teacher
// forward, detached hand-off, student forward, task terms, and (in the dual
// mode) the distillation terms. Shared by the trainer, the gradient checker
// and the verification suite so all three differentiate the same graph. With
// a BoundaryPin the detached values come from the pin instead of the live
// teacher, which freezes the stop-gradient boundary for finite differences;
// at the pin point the two graphs have identical values and gradients.
template <typename S>
AssembledObjective<S> assemble_objective(Tape<S>& tape, BackboneModel<S>& bb,
                                         SideModel<S>* side, DistillBank<S>* bank,
                                         TuneMode mode, const DistillConfig& dcfg,
                                         const std::vector<Mat<S>>& xs,
                                         const std::vector<int>& labels,
                                         const MaskVector& mask,
                                         const BoundaryPin<S>* pin = nullptr) {
  if (xs.empty()) throw std::invalid_argument("train step: empty batch");
  if (xs.size() != labels.size())
    throw std::invalid_argument("train step: " + std::to_string(xs.size()) +
                                " inputs vs " + std::to_string(labels.size()) +
                                " labels");
  for (int y : labels)
    if (y < 0 || y >= bb.spec.out_dim)
      throw std::invalid_argument("train step: label " + std::to_string(y) +
                                  " outside [0, " +
                                  std::to_string(bb.spec.out_dim) + ")");
  const bool dual = mode_uses_side(mode);
  const bool distill = mode_uses_distill(mode);
  if (dual && !side)
    throw std::invalid_argument("assemble_objective: this mode needs a side network");
  if (distill && !bank)
    throw std::invalid_argument("assemble_objective: this mode needs a distill bank");
  if (pin && (pin->feats.size() != xs.size() || pin->y_side.size() != xs.size()))
    throw std::invalid_argument("assemble_objective: boundary pin covers " +
                                std::to_string(pin->feats.size()) +
                                " items, batch has " + std::to_string(xs.size()));

  std::vector<ItemTrace<S>> items;
  std::vector<Tensor<S>> task_terms;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    auto btr = backbone_forward(tape, bb, xs[i]);
    Mat<S> y = init_zeros<S>(1, bb.spec.out_dim);
    y(0, labels[i]) = S(1);
    if (dual) {
      std::vector<Tensor<S>> det;
      {
        SegmentScope<S> scope(tape, Segment::projector);
        if (pin)
          for (const Mat<S>& f : pin->feats[i]) det.push_back(tape.constant(f));
        else
          for (auto& f : btr.feats) det.push_back(detach(f));
      }
      auto str = side_forward(tape, *side, det);
      SegmentScope<S> scope(tape, Segment::head);
      Tensor<S> task = mse_like(str.logits, tape.constant(y));
      if (distill && dcfg.task_on_backbone)
        task = add(task, mse_like(btr.logits, tape.constant(y)));
      task_terms.push_back(task);
      ItemTrace<S> it;
      it.task = task;
      it.feats_teacher = std::move(det);
      it.feats_student = std::move(str.feats);
      it.y_backbone = btr.logits;
      it.y_side = pin ? tape.constant(pin->y_side[i]) : str.logits;
      items.push_back(std::move(it));
    } else {
      SegmentScope<S> scope(tape, Segment::head);
      task_terms.push_back(mse_like(btr.logits, tape.constant(y)));
    }
  }

  AssembledObjective<S> out;
  if (distill) {
    auto obj = combined_objective(tape, items, *bank, dcfg, bb.spec, mask);
    out.total = obj.total;
    out.values = obj.values;
  } else {
    out.total = scale(sum_of(task_terms), S(1) / static_cast<S>(task_terms.size()));
    out.values.sft = static_cast<double>(out.total.item());
    out.values.total = out.values.sft;
  }
  return out;
}

template <typename S>
class Trainer {
 public:
  Trainer(BackboneModel<S>& backbone, SideModel<S>* side, DistillBank<S>* bank,
          TuneMode mode, DistillConfig dcfg, TrainHyper hyper, std::uint64_t seed)
      : bb_(backbone),
        side_(side),
        bank_(bank),
        mode_(mode),
        dcfg_(dcfg),
        hyper_(hyper),
        opt_(hyper.optim),
        mask_rng_(derive_seed(seed, 0x5afe)) {
    dcfg_.validate();
    hyper_.validate();
    if (mode_uses_side(mode_) && !side_)
      throw std::invalid_argument("trainer: this mode needs a side network");
    if (mode_uses_distill(mode_) && !bank_)
      throw std::invalid_argument("trainer: this mode needs a distill bank");
    apply_freeze(bb_, side_, bank_, mode_);
    trainables_ = trainable_params(bb_, side_, bank_);
  }

  TrainStepResult step(const std::vector<Mat<S>>& xs, const std::vector<int>& labels) {
    if (step_ >= hyper_.total_steps)
      throw std::logic_error("train step: schedule exhausted after " +
                             std::to_string(hyper_.total_steps) + " steps");
    const double lr = lr_schedule(step_, hyper_.total_steps, hyper_.base_lr,
                                  hyper_.schedule, hyper_.warmup_frac);

    Tape<S> tape;
    MaskVector mask;
    if (mode_uses_distill(mode_))
      mask = sample_mask(bb_.spec.tokens, dcfg_.lambda, mask_rng_);
    auto obj = assemble_objective(tape, bb_, side_, bank_, mode_, dcfg_, xs,
                                  labels, mask);

    auto gm = tape.backward(obj.total);
    opt_.step(trainables_, tape, gm, lr);
    ++step_;
    TrainStepResult res;
    res.losses = obj.values;
    res.lr = lr;
    return res;
  }

  std::int64_t steps_done() const { return step_; }
  std::int64_t steps_total() const { return hyper_.total_steps; }
  TuneMode mode() const { return mode_; }
  const std::vector<Parameter<S>*>& trainables() const { return trainables_; }

 private:
  BackboneModel<S>& bb_;
  SideModel<S>* side_;
  DistillBank<S>* bank_;
  TuneMode mode_;
  DistillConfig dcfg_;
  TrainHyper hyper_;
  AdamW<S> opt_;
  Rng mask_rng_;
  std::vector<Parameter<S>*> trainables_;
  std::int64_t step_ = 0;
};

// ----- evaluation ---------------------------------------------------------------

enum class EvalPath { assisted, faded };

inline const char* to_string(EvalPath p) {
  return p == EvalPath::assisted ? "assisted" : "faded";
}

struct EvalResult {
  double accuracy = 0.0;
  std::int64_t flops_per_sample = 0;
  std::int64_t samples = 0;
};

template <typename S>
EvalResult evaluate(const BackboneModel<S>& bb, const SideModel<S>* side,
                    const std::vector<Mat<S>>& xs, const std::vector<int>& ys,
                    EvalPath path) {
  if (xs.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (xs.size() != ys.size())
    throw std::invalid_argument("evaluate: " + std::to_string(xs.size()) +
                                " inputs vs " + std::to_string(ys.size()) + " labels");
  if (path == EvalPath::assisted && !side)
    throw std::invalid_argument("evaluate: assisted path needs the side network");

  std::int64_t correct = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    Mat<S> logits;
    if (path == EvalPath::faded) {
      logits = faded_forward(bb, xs[i]);
    } else {
      Tape<S> tape;
      auto btr = backbone_forward(tape, bb, xs[i]);
      std::vector<Tensor<S>> det;
      for (auto& f : btr.feats) det.push_back(detach(f));
      auto str = side_forward(tape, *side, det);
      logits = str.logits.value();
    }
    Index arg = 0;
    for (Index c = 1; c < logits.cols(); ++c)
      if (logits(0, c) > logits(0, arg)) arg = c;
    correct += (arg == static_cast<Index>(ys[i]));
  }
  EvalResult res;
  res.samples = static_cast<std::int64_t>(xs.size());
  res.accuracy = static_cast<double>(correct) / static_cast<double>(res.samples);
  const FlopReport fl = count_flops(bb.spec);
  res.flops_per_sample =
      path == EvalPath::faded ? fl.faded_total() : fl.training_forward_total();
  return res;
}

}  // namespace mdpd
