// Command-line front end: pretrain / finetune / eval / ablate plus the
// memory accountant (mem-report), the finite-difference verifier (grad-check)
// and the canonical config printer (dump-config).

#include <chrono>
#include <cstdio>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mdpd/checkpoint.hpp"
#include "mdpd/errors.hpp"
#include "mdpd/grad_check.hpp"
#include "mdpd/harness.hpp"
#include "mdpd/memory_model.hpp"

namespace {

using namespace mdpd;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

// Everything a subcommand may override on top of the config file.
struct Opts {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string mode;
  std::string sweep;
  std::string split = "transfer";
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  double lambda = 0.0;
  int reduction = 0;
  double min_acc = 0.9;
  double tol = 0.15;
  double fd_step = 1e-5;
  double fd_tol = 1e-4;
  bool faded_only = false;
  bool matrix = false;
};

void add_config_flags(CLI::App* sub, Opts& o) {
  sub->add_option("--config", o.config, "key = value config file");
  sub->add_option("--seed", o.seed, "run seed (overrides the file)");
  sub->add_option("--out", o.out, "output directory");
}

void add_train_flags(CLI::App* sub, Opts& o) {
  sub->add_option("--mode", o.mode, "mdpd | full_ft | partial | side_only");
  sub->add_option("--steps", o.steps, "training steps");
  sub->add_option("--lambda", o.lambda, "token mask ratio");
  sub->add_option("--r", o.reduction, "side-network width reduction");
}

bool given(const CLI::App* sub, const std::string& name) {
  const CLI::Option* opt = sub->get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

std::string out_dir(const CLI::App* sub, const Opts& o, const std::string& fallback) {
  return given(sub, "--out") ? o.out : fallback;
}

TrainConfig build_config(const CLI::App* sub, const Opts& o) {
  TrainConfig cfg;
  if (given(sub, "--config")) cfg = load_config_file(o.config);
  if (given(sub, "--seed")) cfg.seed = o.seed;
  if (given(sub, "--mode")) set_config_key(cfg, "mode", o.mode);
  if (given(sub, "--steps"))
    set_config_key(cfg, "train.steps", std::to_string(o.steps));
  if (given(sub, "--lambda")) set_config_key(cfg, "distill.lambda", fmt(o.lambda));
  if (given(sub, "--r"))
    set_config_key(cfg, "arch.reduction", std::to_string(o.reduction));
  cfg.validate();
  return cfg;
}

void print_warnings(const TrainConfig& cfg) {
  for (const std::string& w : config_mode_warnings(cfg))
    std::cerr << "warning: " << w << "\n";
}

void print_row(const RunOutput& r) {
  std::cout << r.run_id << " mode=" << r.mode << " seed=" << r.seed
            << " steps=" << r.steps << " final_total=" << fmt(r.final_total)
            << " faded_acc=" << fmt6(r.faded_acc);
  if (r.assisted_acc) std::cout << " assisted_acc=" << fmt6(*r.assisted_acc);
  std::cout << " flops_faded=" << r.flops_faded;
  if (r.flops_assisted) std::cout << " flops_assisted=" << *r.flops_assisted;
  std::cout << "\n";
}

int cmd_pretrain(const CLI::App* sub, const Opts& o) {
  TrainConfig cfg = build_config(sub, o);
  RunLog log(out_dir(sub, o, "runs/pretrain"));
  const RunOutput row = run_pretrain(cfg, log, o.min_acc);
  log.write_summary();
  print_row(row);
  std::cout << "checkpoint: " << log.dir() << "/backbone.ckpt\n";
  return kExitOk;
}

int cmd_finetune(const CLI::App* sub, const Opts& o) {
  TrainConfig cfg = build_config(sub, o);
  print_warnings(cfg);
  RunLog log(out_dir(sub, o, "runs/finetune"));
  const RunOutput row = run_finetune(cfg, o.checkpoint, log);
  log.write_summary();
  print_row(row);
  std::cout << "checkpoint: " << log.dir() << "/finetuned.ckpt\n";
  return kExitOk;
}

int cmd_eval(const CLI::App* sub, const Opts& o) {
  TrainConfig cfg = build_config(sub, o);
  if (o.split != "base" && o.split != "transfer")
    throw ConfigError("--split must be base or transfer, got '" + o.split + "'");
  RunLog log(out_dir(sub, o, "runs/eval"));
  const RunOutput row =
      run_eval(cfg, o.checkpoint, o.faded_only, o.split == "base", log);
  log.write_summary();
  print_row(row);
  return kExitOk;
}

int cmd_ablate(const CLI::App* sub, const Opts& o) {
  TrainConfig cfg = build_config(sub, o);
  const auto eq = o.sweep.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 >= o.sweep.size())
    throw ConfigError("--sweep expects KEY=V1,V2,... got '" + o.sweep + "'");
  const std::string key = o.sweep.substr(0, eq);
  std::vector<std::string> values;
  std::string rest = o.sweep.substr(eq + 1);
  std::size_t pos = 0;
  while (pos <= rest.size()) {
    const auto comma = rest.find(',', pos);
    const std::string v =
        rest.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (v.empty()) throw ConfigError("--sweep has an empty value in '" + o.sweep + "'");
    values.push_back(v);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  print_warnings(cfg);
  RunLog log(out_dir(sub, o, "runs/ablate"));
  const auto rows = run_ablate(cfg, key, values, o.checkpoint, log);
  log.write_summary();
  for (const RunOutput& r : rows) print_row(r);
  return kExitOk;
}

void print_analytic(const ArchSpec& arch, const AnalyticMemoryReport& rep) {
  std::cout << "arch: layers=" << arch.layers << " tokens=" << arch.tokens
            << " hidden=" << arch.hidden << " reduction=" << arch.reduction
            << " mlp_ratio=" << arch.mlp_ratio << "\n";
  std::cout << "analytic stored scalars per item:\n"
            << "  activations          " << rep.activations << "\n"
            << "  act_derivs           " << rep.act_derivs << "\n"
            << "  full_ft              " << rep.full_ft << "\n"
            << "  petl_lower_bound     " << rep.petl_lower_bound << "\n"
            << "  side_network         " << rep.side_network
            << (rep.exact_division ? "" : "  (rounded)") << "\n"
            << "  attention_quadratic  " << rep.attention_quadratic << "\n";
}

int cmd_mem_report(const CLI::App* sub, const Opts& o) {
  TrainConfig cfg = build_config(sub, o);
  bool all_pass = true;
  if (o.matrix) {
    std::cout << "hidden reduction ratio_empirical ratio_analytic gap tol verdict\n";
    for (int hidden : {128, 256, 512}) {
      for (int r : {2, 4}) {
        ArchSpec arch = cfg.arch;
        arch.hidden = hidden;
        arch.reduction = r;
        const auto res = measure_and_reconcile<double>(arch, cfg.seed, o.tol);
        all_pass = all_pass && res.pass;
        std::cout << hidden << " " << r << " " << fmt6(res.ratio_empirical) << " "
                  << fmt6(res.ratio_analytic) << " " << fmt6(res.gap) << " "
                  << fmt6(res.tol) << " " << (res.pass ? "PASS" : "FAIL") << "\n";
      }
    }
  } else {
    const AnalyticMemoryReport rep = analytic_memory(cfg.arch);
    print_analytic(cfg.arch, rep);
    const auto res = measure_and_reconcile<double>(cfg.arch, cfg.seed, o.tol);
    all_pass = res.pass;
    std::cout << "empirical: side_stored=" << res.side_stored
              << " backbone_stored=" << res.backbone_stored
              << " ratio_empirical=" << fmt6(res.ratio_empirical)
              << " ratio_analytic=" << fmt6(res.ratio_analytic)
              << " gap=" << fmt6(res.gap) << " tol=" << fmt6(res.tol) << " -> "
              << (res.pass ? "PASS" : "FAIL") << "\n";
  }
  if (!all_pass)
    throw ConvergenceFailure("memory reconciliation exceeded tolerance " +
                             fmt6(o.tol));
  return kExitOk;
}

int cmd_grad_check(const CLI::App* sub, const Opts& o) {
  TrainConfig cfg;
  if (given(sub, "--config")) {
    cfg = build_config(sub, o);
  } else {
    // default: a model small enough to finite-difference exhaustively
    cfg.arch.layers = 2;
    cfg.arch.tokens = 8;
    cfg.arch.hidden = 16;
    cfg.arch.reduction = 2;
    cfg.arch.out_dim = 3;
    cfg.arch.mlp_ratio = 2;
    cfg.arch.input_dim = 4;
    cfg.distill.rank = 3;
    if (given(sub, "--seed")) cfg.seed = o.seed;
    if (given(sub, "--mode")) set_config_key(cfg, "mode", o.mode);
    if (given(sub, "--lambda")) set_config_key(cfg, "distill.lambda", fmt(o.lambda));
    if (given(sub, "--r"))
      set_config_key(cfg, "arch.reduction", std::to_string(o.reduction));
    cfg.validate();
  }

  auto bb = build_backbone<double>(cfg.arch, cfg.seed);
  std::unique_ptr<SideModel<double>> side;
  std::unique_ptr<DistillBank<double>> bank;
  if (mode_uses_side(cfg.mode))
    side = std::make_unique<SideModel<double>>(build_side<double>(cfg.arch, cfg.seed));
  if (mode_uses_distill(cfg.mode))
    bank = std::make_unique<DistillBank<double>>(
        build_distill_bank<double>(cfg.arch, cfg.distill, cfg.seed));
  apply_freeze(bb, side.get(), bank.get(), cfg.mode);
  const auto trainables = trainable_params(bb, side.get(), bank.get());

  Rng rng(derive_seed(cfg.seed, 0x9c));
  std::vector<Mat<double>> xs;
  std::vector<int> labels;
  for (int i = 0; i < 2; ++i) {
    Mat<double> x(cfg.arch.tokens, cfg.arch.input_dim);
    for (Index a = 0; a < x.rows(); ++a)
      for (Index b = 0; b < x.cols(); ++b) x(a, b) = rng.gaussian();
    xs.push_back(std::move(x));
    labels.push_back(i % cfg.arch.out_dim);
  }
  MaskVector mask;
  if (mode_uses_distill(cfg.mode))
    mask = sample_mask(cfg.arch.tokens, cfg.distill.lambda, rng);

  std::int64_t coords = 0;
  for (const auto* p : trainables) coords += p->size();
  std::cout << "grad-check: mode=" << to_string(cfg.mode) << " layers="
            << cfg.arch.layers << " tokens=" << cfg.arch.tokens << " hidden="
            << cfg.arch.hidden << " reduction=" << cfg.arch.reduction
            << " trainable_tensors=" << trainables.size() << " coords=" << coords
            << "\n";

  const auto t0 = std::chrono::steady_clock::now();

  // Finite differences must hold the stop-gradient boundary fixed, so the
  // check differences the pinned graph; welding it back to the live graph,
  // the two must produce the same gradients at the pin point.
  BoundaryPin<double> pin;
  if (side) pin = capture_boundary(bb, *side, xs);
  const BoundaryPin<double>* pin_ptr = side ? &pin : nullptr;

  double weld_err = 0.0;
  {
    Tape<double> live_tape, pinned_tape;
    auto live = assemble_objective(live_tape, bb, side.get(), bank.get(), cfg.mode,
                                   cfg.distill, xs, labels, mask);
    auto pinned = assemble_objective(pinned_tape, bb, side.get(), bank.get(),
                                     cfg.mode, cfg.distill, xs, labels, mask,
                                     pin_ptr);
    auto live_gm = live_tape.backward(live.total);
    auto pinned_gm = pinned_tape.backward(pinned.total);
    for (const auto* p : trainables) {
      const auto ln = live_tape.param_node(p->uid);
      const auto pn = pinned_tape.param_node(p->uid);
      Mat<double> lg = (ln >= 0 && live_gm.contains(ln))
                           ? live_gm.at(ln)
                           : Mat<double>::Zero(p->value.rows(), p->value.cols());
      Mat<double> pg = (pn >= 0 && pinned_gm.contains(pn))
                           ? pinned_gm.at(pn)
                           : Mat<double>::Zero(p->value.rows(), p->value.cols());
      for (Index a = 0; a < lg.rows(); ++a)
        for (Index b = 0; b < lg.cols(); ++b) {
          const double s = std::max({1.0, std::abs(lg(a, b)), std::abs(pg(a, b))});
          weld_err = std::max(weld_err, std::abs(lg(a, b) - pg(a, b)) / s);
        }
    }
  }

  auto build = [&](Tape<double>& tape) {
    return assemble_objective(tape, bb, side.get(), bank.get(), cfg.mode,
                              cfg.distill, xs, labels, mask, pin_ptr)
        .total;
  };
  const GradCheckReport rep = grad_check_params<double>(build, trainables, o.fd_step);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const double worst = std::max(rep.max_rel_error, weld_err);
  const bool pass = worst < o.fd_tol;
  std::cout << "grad-check: coords_checked=" << rep.coords_checked
            << " max_rel_error=" << fmt(rep.max_rel_error)
            << " live_vs_pinned=" << fmt(weld_err) << " h=" << fmt(o.fd_step)
            << " elapsed_s=" << fmt6(secs) << " -> " << (pass ? "PASS" : "FAIL")
            << " (tol " << fmt(o.fd_tol) << ")\n";
  if (!pass)
    throw ConvergenceFailure("gradient check failed: max relative error " +
                             fmt(worst) + " >= " + fmt(o.fd_tol));
  return kExitOk;
}

int cmd_dump_config(const CLI::App* sub, const Opts& o) {
  TrainConfig cfg = build_config(sub, o);
  std::cout << dump_config(cfg);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked dual-path distillation: train, fade, and account for memory"};
  app.require_subcommand(1);

  Opts o;

  CLI::App* pre = app.add_subcommand("pretrain", "full finetuning on the base task");
  add_config_flags(pre, o);
  pre->add_option("--steps", o.steps, "training steps");
  pre->add_option("--min-acc", o.min_acc, "required faded accuracy")
      ->capture_default_str();

  CLI::App* fin = app.add_subcommand("finetune", "transfer to the permuted-label task");
  add_config_flags(fin, o);
  add_train_flags(fin, o);
  fin->add_option("--checkpoint", o.checkpoint, "pretrained backbone checkpoint")
      ->required();

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_config_flags(ev, o);
  ev->add_option("--mode", o.mode, "mode the checkpoint was trained in");
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate")->required();
  ev->add_option("--split", o.split, "base | transfer")->capture_default_str();
  ev->add_flag("--faded-only", o.faded_only, "skip the assisted path");

  CLI::App* ab = app.add_subcommand("ablate", "sweep one config key");
  add_config_flags(ab, o);
  add_train_flags(ab, o);
  ab->add_option("--sweep", o.sweep, "KEY=V1,V2,...")->required();
  ab->add_option("--checkpoint", o.checkpoint,
                 "pretrained checkpoint (pretrains here when omitted)");

  CLI::App* mem = app.add_subcommand("mem-report",
                                     "analytic memory bill and empirical census");
  add_config_flags(mem, o);
  mem->add_option("--r", o.reduction, "side-network width reduction");
  mem->add_option("--tol", o.tol, "reconciliation tolerance")->capture_default_str();
  mem->add_flag("--matrix", o.matrix, "sweep hidden x reduction");

  CLI::App* gc = app.add_subcommand("grad-check",
                                    "finite-difference check of the full objective");
  add_config_flags(gc, o);
  gc->add_option("--mode", o.mode, "objective to check");
  gc->add_option("--lambda", o.lambda, "token mask ratio");
  gc->add_option("--r", o.reduction, "side-network width reduction");
  gc->add_option("--fd-step", o.fd_step, "finite-difference step")
      ->capture_default_str();
  gc->add_option("--tol", o.fd_tol, "max relative error allowed")
      ->capture_default_str();

  CLI::App* dump = app.add_subcommand("dump-config", "print the canonical config");
  add_config_flags(dump, o);
  add_train_flags(dump, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? mdpd::kExitOk : mdpd::kExitConfig;
  }

  try {
    if (pre->parsed()) return cmd_pretrain(pre, o);
    if (fin->parsed()) return cmd_finetune(fin, o);
    if (ev->parsed()) return cmd_eval(ev, o);
    if (ab->parsed()) return cmd_ablate(ab, o);
    if (mem->parsed()) return cmd_mem_report(mem, o);
    if (gc->parsed()) return cmd_grad_check(gc, o);
    if (dump->parsed()) return cmd_dump_config(dump, o);
  } catch (const mdpd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return mdpd::kExitConfig;
  } catch (const mdpd::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return mdpd::kExitIo;
  } catch (const mdpd::ConvergenceFailure& e) {
    std::cerr << "verification failure: " << e.what() << "\n";
    return mdpd::kExitConvergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return mdpd::kExitOk;
}
