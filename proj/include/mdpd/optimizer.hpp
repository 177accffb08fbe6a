#pragma once

// AdamW with decoupled weight decay, plus the warmup-then-decay learning-rate
// schedule. Decay applies only to parameters flagged for it (weight matrices);
// norms, biases, gates and mask tokens are exempt.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "mdpd/params.hpp"
#include "mdpd/tape.hpp"

namespace mdpd {

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw std::invalid_argument("optim betas must lie in [0, 1)");
    if (eps <= 0.0) throw std::invalid_argument("optim.eps must be positive");
    if (weight_decay < 0.0)
      throw std::invalid_argument("optim.weight_decay must be >= 0");
  }
};

enum class SchedKind { linear, cosine };

inline const char* to_string(SchedKind k) {
  return k == SchedKind::linear ? "linear" : "cosine";
}

inline SchedKind sched_from_string(const std::string& s) {
  if (s == "linear") return SchedKind::linear;
  if (s == "cosine") return SchedKind::cosine;
  throw std::invalid_argument("unknown schedule '" + s +
                              "' (expected linear or cosine)");
}

// Linear ramp from zero over the warmup span, then decay to zero at
// total_steps (linearly, or along a half cosine).
inline double lr_schedule(std::int64_t step, std::int64_t total_steps, double base_lr,
                          SchedKind kind, double warmup_frac) {
  if (total_steps <= 0)
    throw std::invalid_argument("lr_schedule: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("lr_schedule: step " + std::to_string(step) +
                                " outside [0, " + std::to_string(total_steps) + "]");
  if (base_lr < 0.0) throw std::invalid_argument("lr_schedule: base_lr must be >= 0");
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0))
    throw std::invalid_argument("lr_schedule: warmup_frac must lie in [0, 1)");

  const double warm = warmup_frac * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warm) return base_lr * s / warm;
  const double span = static_cast<double>(total_steps) - warm;
  const double progress = span > 0.0 ? (s - warm) / span : 1.0;
  if (kind == SchedKind::linear) return base_lr * (1.0 - progress);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename S>
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  // One update over the trainable set. Gradients are read off the tape's
  // result by parameter uid; a trainable parameter the loss never touched
  // simply decays its moments. Passing a frozen parameter is a freeze breach.
  void step(const std::vector<Parameter<S>*>& params, const Tape<S>& tape,
            const GradientMap<S>& grads, double lr) {
    if (lr < 0.0) throw std::invalid_argument("AdamW: negative learning rate");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Parameter<S>* p : params) {
      if (!p->trainable)
        throw std::invalid_argument("AdamW: gradient update for frozen parameter '" +
                                    p->name + "' (freeze breach)");
      const std::int64_t node = tape.param_node(p->uid);
      Mat<S> g = (node >= 0 && grads.contains(node))
                     ? grads.at(node)
                     : Mat<S>(Mat<S>::Zero(p->value.rows(), p->value.cols()));
      if (g.rows() != p->value.rows() || g.cols() != p->value.cols())
        throw std::invalid_argument("AdamW: gradient shape mismatch for '" + p->name +
                                    "'");
      Slot& slot = slots_[p->uid];
      if (slot.m.size() == 0) {
        slot.m = Mat<S>::Zero(p->value.rows(), p->value.cols());
        slot.v = Mat<S>::Zero(p->value.rows(), p->value.cols());
      }
      const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
      slot.m = b1 * slot.m + (S(1) - b1) * g;
      slot.v = (b2 * slot.v.array() + (S(1) - b2) * g.array().square()).matrix();
      Mat<S> update =
          ((slot.m.array() / static_cast<S>(bc1)) /
           ((slot.v.array() / static_cast<S>(bc2)).sqrt() + static_cast<S>(cfg_.eps)))
              .matrix();
      if (p->decay) update += static_cast<S>(cfg_.weight_decay) * p->value;
      p->value -= static_cast<S>(lr) * update;
    }
  }

  std::int64_t steps_taken() const { return t_; }
  const OptimConfig& config() const { return cfg_; }

 private:
  struct Slot {
    Mat<S> m, v;
  };
  OptimConfig cfg_;
  std::unordered_map<std::uint64_t, Slot> slots_;
  std::int64_t t_ = 0;
};

}  // namespace mdpd
