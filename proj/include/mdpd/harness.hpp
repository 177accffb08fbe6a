#pragma once

// Experiment harness: pretrain a backbone on the base task, finetune on the
// permuted-label transfer task in any tuning mode, evaluate both inference
// paths, and record everything under an output directory (records.ndjson for
// the full trace, summary.csv for the deterministic per-run rows).

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mdpd/config.hpp"
#include "mdpd/task.hpp"

namespace mdpd {

struct RunOutput {
  std::string run_id;
  std::string mode;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  double final_total = 0.0;
  double faded_acc = 0.0;
  std::optional<double> assisted_acc;  // only when a side network exists
  std::int64_t flops_faded = 0;
  std::optional<std::int64_t> flops_assisted;
  std::string config_hash;
};

// Owns one output directory. The ndjson trace includes wall-clock times; the
// CSV summary deliberately does not, so identical runs produce identical
// bytes.
class RunLog {
 public:
  explicit RunLog(const std::string& dir);

  const std::string& dir() const { return dir_; }

  void step_record(const std::string& run_id, std::int64_t step, double lr,
                   double total, double sft, double log, double sha, double deep);
  void eval_record(const std::string& run_id, const std::string& path,
                   double accuracy, std::int64_t flops_per_sample,
                   std::int64_t samples);
  void run_record(const RunOutput& row, double wall_ms);
  void write_summary();

  static std::string summary_csv(const std::vector<RunOutput>& rows);

 private:
  std::string dir_;
  std::ofstream ndjson_;
  std::vector<RunOutput> rows_;
};

// Fresh fan-in-uniform head weights; every finetuning mode starts the new
// task from the same reinitialized head.
void reinit_head(BackboneModel<double>& bb, std::uint64_t seed);

// Full finetuning of a randomly initialized backbone on the base task.
// Writes <dir>/backbone.ckpt; fails with ConvergenceFailure when the faded
// accuracy on the held-out base split ends below min_accuracy.
RunOutput run_pretrain(const TrainConfig& cfg, RunLog& log, double min_accuracy = 0.9);

// Transfer run: load the pretrained backbone, reinitialize the head, train
// in cfg.mode on the permuted-label task, evaluate faded (and assisted when a
// side network exists) and write <dir>/<run_id>.ckpt.
RunOutput run_finetune(const TrainConfig& cfg, const std::string& checkpoint,
                       RunLog& log, const std::string& run_id = "finetuned");

// Evaluate an existing checkpoint on the base or transfer eval split.
RunOutput run_eval(const TrainConfig& cfg, const std::string& checkpoint,
                   bool faded_only, bool base_split, RunLog& log);

// One finetune per value of `key`; pretrains first when no checkpoint is
// given. All rows land in the same summary.
std::vector<RunOutput> run_ablate(const TrainConfig& base, const std::string& key,
                                  const std::vector<std::string>& values,
                                  std::string checkpoint, RunLog& log);

}  // namespace mdpd
