#include "mdpd/harness.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "mdpd/checkpoint.hpp"
#include "mdpd/errors.hpp"

namespace mdpd {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string sanitize_for_filename(const std::string& s) {
  std::string out = s;
  for (char& c : out) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                    (c >= '0' && c <= '9') || c == '.' || c == '-' || c == '_';
    if (!ok) c = '_';
  }
  return out;
}

std::vector<Parameter<double>*> saved_params(BackboneModel<double>& bb,
                                             SideModel<double>* side) {
  std::vector<Parameter<double>*> out = bb.params();
  if (side)
    for (auto* p : side->params()) out.push_back(p);
  return out;
}

struct Batcher {
  const Dataset& data;
  int batch;

  void fill(std::int64_t step, std::vector<Mat<double>>& xs, std::vector<int>& ys) const {
    xs.clear();
    ys.clear();
    const auto n = static_cast<std::int64_t>(data.size());
    for (int i = 0; i < batch; ++i) {
      const auto idx = static_cast<std::size_t>(
          (step * batch + i) % n);  // deterministic cycling, no reshuffle
      xs.push_back(data.xs[idx]);
      ys.push_back(data.ys[idx]);
    }
  }
};

// Shared train loop. Returns the last step's total loss.
double train_loop(Trainer<double>& trainer, const Dataset& data, int batch,
                  const std::string& run_id, RunLog& log) {
  Batcher batcher{data, batch};
  std::vector<Mat<double>> xs;
  std::vector<int> ys;
  double last_total = 0.0;
  for (std::int64_t s = 0; s < trainer.steps_total(); ++s) {
    batcher.fill(s, xs, ys);
    const TrainStepResult r = trainer.step(xs, ys);
    last_total = r.losses.total;
    log.step_record(run_id, s, r.lr, r.losses.total, r.losses.sft, r.losses.log,
                    r.losses.sha_sum(), r.losses.deep_sum());
  }
  return last_total;
}

}  // namespace

RunLog::RunLog(const std::string& dir) : dir_(dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create output directory '" + dir_ + "': " + ec.message());
  const std::string path = dir_ + "/records.ndjson";
  ndjson_.open(path, std::ios::trunc);
  if (!ndjson_) throw IoError("cannot write '" + path + "'");
}

void RunLog::step_record(const std::string& run_id, std::int64_t step, double lr,
                         double total, double sft, double log, double sha,
                         double deep) {
  json j{{"type", "step"}, {"run", run_id}, {"step", step},  {"lr", lr},
         {"total", total}, {"sft", sft},    {"log", log},    {"sha", sha},
         {"deep", deep}};
  ndjson_ << j.dump() << "\n";
}

void RunLog::eval_record(const std::string& run_id, const std::string& path,
                         double accuracy, std::int64_t flops_per_sample,
                         std::int64_t samples) {
  json j{{"type", "eval"},       {"run", run_id},
         {"path", path},         {"accuracy", accuracy},
         {"flops_per_sample", flops_per_sample}, {"samples", samples}};
  ndjson_ << j.dump() << "\n";
}

void RunLog::run_record(const RunOutput& row, double wall_ms) {
  json j{{"type", "run"},
         {"run", row.run_id},
         {"mode", row.mode},
         {"seed", row.seed},
         {"steps", row.steps},
         {"final_total", row.final_total},
         {"faded_acc", row.faded_acc},
         {"assisted_acc", row.assisted_acc ? json(*row.assisted_acc) : json()},
         {"flops_faded", row.flops_faded},
         {"flops_assisted", row.flops_assisted ? json(*row.flops_assisted) : json()},
         {"config_hash", row.config_hash},
         {"wall_ms", wall_ms}};
  ndjson_ << j.dump() << "\n";
  ndjson_.flush();
  rows_.push_back(row);
}

std::string RunLog::summary_csv(const std::vector<RunOutput>& rows) {
  std::ostringstream out;
  out << "run_id,mode,seed,steps,final_total,faded_acc,assisted_acc,"
         "flops_faded,flops_assisted,config_hash\n";
  for (const RunOutput& r : rows) {
    out << r.run_id << ',' << r.mode << ',' << r.seed << ',' << r.steps << ','
        << fmt_double(r.final_total) << ',' << fmt_double(r.faded_acc) << ',';
    if (r.assisted_acc) out << fmt_double(*r.assisted_acc);
    out << ',' << r.flops_faded << ',';
    if (r.flops_assisted) out << *r.flops_assisted;
    out << ',' << r.config_hash << "\n";
  }
  return out.str();
}

void RunLog::write_summary() {
  const std::string path = dir_ + "/summary.csv";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << summary_csv(rows_);
  if (!out) throw IoError("failed writing '" + path + "'");
}

void reinit_head(BackboneModel<double>& bb, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x6ead));
  bb.w_head.value = init_uniform_fan_in<double>(bb.spec.hidden, bb.spec.out_dim,
                                                bb.spec.hidden, rng);
}

RunOutput run_pretrain(const TrainConfig& cfg, RunLog& log, double min_accuracy) {
  cfg.validate();
  const auto t0 = Clock::now();
  const std::string run_id = "pretrain";

  TaskPair task = make_task(cfg.task, cfg.arch, cfg.seed);
  auto bb = build_backbone<double>(cfg.arch, cfg.seed);
  Trainer<double> trainer(bb, nullptr, nullptr, TuneMode::full_ft, cfg.distill,
                          cfg.train, cfg.seed);
  const double final_total = train_loop(trainer, task.base_train, cfg.batch, run_id, log);

  const EvalResult ev = evaluate<double>(bb, nullptr, task.base_eval.xs,
                                         task.base_eval.ys, EvalPath::faded);
  log.eval_record(run_id, "faded", ev.accuracy, ev.flops_per_sample, ev.samples);

  save_checkpoint(log.dir() + "/backbone.ckpt", bb.params());

  RunOutput row;
  row.run_id = run_id;
  row.mode = to_string(TuneMode::full_ft);
  row.seed = cfg.seed;
  row.steps = cfg.train.total_steps;
  row.final_total = final_total;
  row.faded_acc = ev.accuracy;
  row.flops_faded = ev.flops_per_sample;
  row.config_hash = config_hash(cfg);
  log.run_record(row, ms_since(t0));

  if (ev.accuracy < min_accuracy)
    throw ConvergenceFailure("pretraining stalled: faded accuracy " +
                             fmt_double(ev.accuracy) + " after " +
                             std::to_string(cfg.train.total_steps) +
                             " steps (need " + fmt_double(min_accuracy) + ")");
  return row;
}

RunOutput run_finetune(const TrainConfig& cfg, const std::string& checkpoint,
                       RunLog& log, const std::string& run_id) {
  cfg.validate();
  const auto t0 = Clock::now();

  TaskPair task = make_task(cfg.task, cfg.arch, cfg.seed);
  auto bb = build_backbone<double>(cfg.arch, cfg.seed);
  load_into(checkpoint, bb.params());
  reinit_head(bb, cfg.seed);

  std::unique_ptr<SideModel<double>> side;
  std::unique_ptr<DistillBank<double>> bank;
  if (mode_uses_side(cfg.mode))
    side = std::make_unique<SideModel<double>>(
        build_side<double>(cfg.arch, cfg.seed));
  if (mode_uses_distill(cfg.mode))
    bank = std::make_unique<DistillBank<double>>(
        build_distill_bank<double>(cfg.arch, cfg.distill, cfg.seed));

  Trainer<double> trainer(bb, side.get(), bank.get(), cfg.mode, cfg.distill,
                          cfg.train, cfg.seed);
  const double final_total =
      train_loop(trainer, task.transfer_train, cfg.batch, run_id, log);

  const EvalResult faded = evaluate<double>(bb, side.get(), task.transfer_eval.xs,
                                            task.transfer_eval.ys, EvalPath::faded);
  log.eval_record(run_id, "faded", faded.accuracy, faded.flops_per_sample,
                  faded.samples);

  RunOutput row;
  row.run_id = run_id;
  row.mode = to_string(cfg.mode);
  row.seed = cfg.seed;
  row.steps = cfg.train.total_steps;
  row.final_total = final_total;
  row.faded_acc = faded.accuracy;
  row.flops_faded = faded.flops_per_sample;
  row.config_hash = config_hash(cfg);

  if (side) {
    const EvalResult assisted = evaluate<double>(
        bb, side.get(), task.transfer_eval.xs, task.transfer_eval.ys,
        EvalPath::assisted);
    log.eval_record(run_id, "assisted", assisted.accuracy,
                    assisted.flops_per_sample, assisted.samples);
    row.assisted_acc = assisted.accuracy;
    row.flops_assisted = assisted.flops_per_sample;
  }

  save_checkpoint(log.dir() + "/" + sanitize_for_filename(run_id) + ".ckpt",
                  saved_params(bb, side.get()));
  log.run_record(row, ms_since(t0));
  return row;
}

RunOutput run_eval(const TrainConfig& cfg, const std::string& checkpoint,
                   bool faded_only, bool base_split, RunLog& log) {
  cfg.validate();
  const auto t0 = Clock::now();
  const std::string run_id = base_split ? "eval_base" : "eval_transfer";

  TaskPair task = make_task(cfg.task, cfg.arch, cfg.seed);
  const Dataset& split = base_split ? task.base_eval : task.transfer_eval;

  auto bb = build_backbone<double>(cfg.arch, cfg.seed);
  std::unique_ptr<SideModel<double>> side;
  if (mode_uses_side(cfg.mode))
    side = std::make_unique<SideModel<double>>(
        build_side<double>(cfg.arch, cfg.seed));
  load_into(checkpoint, saved_params(bb, side.get()));

  const EvalResult faded =
      evaluate<double>(bb, side.get(), split.xs, split.ys, EvalPath::faded);
  log.eval_record(run_id, "faded", faded.accuracy, faded.flops_per_sample,
                  faded.samples);

  RunOutput row;
  row.run_id = run_id;
  row.mode = to_string(cfg.mode);
  row.seed = cfg.seed;
  row.steps = 0;
  row.final_total = 0.0;
  row.faded_acc = faded.accuracy;
  row.flops_faded = faded.flops_per_sample;
  row.config_hash = config_hash(cfg);

  if (side && !faded_only) {
    const EvalResult assisted =
        evaluate<double>(bb, side.get(), split.xs, split.ys, EvalPath::assisted);
    log.eval_record(run_id, "assisted", assisted.accuracy,
                    assisted.flops_per_sample, assisted.samples);
    row.assisted_acc = assisted.accuracy;
    row.flops_assisted = assisted.flops_per_sample;
  }

  log.run_record(row, ms_since(t0));
  return row;
}

std::vector<RunOutput> run_ablate(const TrainConfig& base, const std::string& key,
                                  const std::vector<std::string>& values,
                                  std::string checkpoint, RunLog& log) {
  if (values.empty()) throw ConfigError("ablate: no sweep values given");
  if (checkpoint.empty()) {
    run_pretrain(base, log);
    checkpoint = log.dir() + "/backbone.ckpt";
  }
  std::vector<RunOutput> rows;
  for (const std::string& v : values) {
    TrainConfig cfg = base;
    set_config_key(cfg, key, v);
    cfg.validate();
    rows.push_back(run_finetune(cfg, checkpoint, log, key + "=" + v));
  }
  return rows;
}

}  // namespace mdpd
