#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdpd/checkpoint.hpp"
#include "mdpd/errors.hpp"
#include "mdpd/harness.hpp"

using namespace mdpd;
using D = double;
namespace fs = std::filesystem;

namespace {

fs::path test_root() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "mdpd_harness_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string dir_for(const std::string& name) {
  return (test_root() / name).string();
}

// Small but non-trivial: converges from scratch in well under a second.
TrainConfig tiny_cfg() {
  TrainConfig cfg;
  cfg.arch.layers = 2;
  cfg.arch.tokens = 8;
  cfg.arch.hidden = 32;
  cfg.arch.reduction = 2;
  cfg.arch.out_dim = 3;
  cfg.arch.mlp_ratio = 2;
  cfg.arch.input_dim = 6;
  cfg.distill.rank = 4;
  cfg.train.total_steps = 80;
  cfg.task.train_size = 96;
  cfg.task.eval_size = 150;
  cfg.seed = 1;
  return cfg;
}

// One shared pretrained backbone for the finetune-oriented cases.
const std::string& pretrained_ckpt() {
  static const std::string path = [] {
    RunLog log(dir_for("shared_pretrain"));
    const RunOutput row = run_pretrain(tiny_cfg(), log);
    log.write_summary();
    REQUIRE(row.faded_acc >= 0.9);
    return log.dir() + "/backbone.ckpt";
  }();
  return path;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::uint64_t fnv_of(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Mat<D> grid(Index r, Index c, D scale) {
  Mat<D> m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j)
      m(i, j) = scale * static_cast<D>(i * c + j) - D(0.37);
  return m;
}

bool same_rows(const RunOutput& a, const RunOutput& b) {
  return a.run_id == b.run_id && a.mode == b.mode && a.seed == b.seed &&
         a.steps == b.steps && a.final_total == b.final_total &&
         a.faded_acc == b.faded_acc && a.assisted_acc == b.assisted_acc &&
         a.flops_faded == b.flops_faded && a.flops_assisted == b.flops_assisted &&
         a.config_hash == b.config_hash;
}

}  // namespace

// ----- synthetic task -------------------------------------------------------------

TEST_CASE("task centroids sit on the radius-3 sphere, separated") {
  const TrainConfig cfg = tiny_cfg();
  const TaskPair tp = make_task(cfg.task, cfg.arch, 7);
  REQUIRE(tp.centroids.rows() == cfg.arch.out_dim);
  REQUIRE(tp.centroids.cols() == cfg.arch.input_dim);
  for (Index k = 0; k < tp.centroids.rows(); ++k)
    CHECK(tp.centroids.row(k).norm() == doctest::Approx(3.0).epsilon(1e-12));
  for (Index a = 0; a < tp.centroids.rows(); ++a)
    for (Index b = a + 1; b < tp.centroids.rows(); ++b)
      CHECK((tp.centroids.row(a) - tp.centroids.row(b)).norm() >= 2.0);
}

TEST_CASE("task labels are balanced and the transfer split permutes them") {
  const TrainConfig cfg = tiny_cfg();
  const TaskPair tp = make_task(cfg.task, cfg.arch, 11);
  const int classes = cfg.arch.out_dim;

  std::vector<int> counts(static_cast<std::size_t>(classes), 0);
  for (std::size_t i = 0; i < tp.base_train.size(); ++i) {
    CHECK(tp.base_train.ys[i] == static_cast<int>(i) % classes);
    counts[static_cast<std::size_t>(tp.base_train.ys[i])]++;
  }
  for (int c : counts) CHECK(c == cfg.task.train_size / classes);

  // valid permutation, not the identity
  std::vector<int> sorted = tp.permutation;
  std::sort(sorted.begin(), sorted.end());
  for (int k = 0; k < classes; ++k) CHECK(sorted[static_cast<std::size_t>(k)] == k);
  bool identity = true;
  for (int k = 0; k < classes; ++k)
    identity = identity && tp.permutation[static_cast<std::size_t>(k)] == k;
  CHECK_FALSE(identity);

  for (std::size_t i = 0; i < tp.transfer_train.size(); ++i)
    CHECK(tp.transfer_train.ys[i] ==
          tp.permutation[static_cast<std::size_t>(static_cast<int>(i) % classes)]);
}

TEST_CASE("task samples are centroid plus scaled noise; zero noise is exact") {
  TrainConfig cfg = tiny_cfg();
  cfg.task.noise = 0.0;
  const TaskPair tp = make_task(cfg.task, cfg.arch, 5);
  for (std::size_t i = 0; i < tp.base_train.size(); ++i) {
    const Index base = static_cast<Index>(tp.base_train.ys[i]);
    for (Index t = 0; t < tp.base_train.xs[i].rows(); ++t)
      CHECK((tp.base_train.xs[i].row(t).array() == tp.centroids.row(base).array())
                .all());
  }

  // same seed reproduces bitwise; a different seed moves the centroids
  cfg.task.noise = 1.0;
  const TaskPair a = make_task(cfg.task, cfg.arch, 21);
  const TaskPair b = make_task(cfg.task, cfg.arch, 21);
  const TaskPair c = make_task(cfg.task, cfg.arch, 22);
  CHECK((a.centroids.array() == b.centroids.array()).all());
  CHECK((a.base_train.xs[0].array() == b.base_train.xs[0].array()).all());
  CHECK((a.transfer_eval.xs[3].array() == b.transfer_eval.xs[3].array()).all());
  CHECK(a.permutation == b.permutation);
  CHECK_FALSE((a.centroids.array() == c.centroids.array()).all());
}

TEST_CASE("nearest-centroid reference classifier solves the eval split") {
  const TrainConfig cfg = tiny_cfg();
  const TaskPair tp = make_task(cfg.task, cfg.arch, 13);
  // token-mean noise has std 1/sqrt(tokens) per dim, small against the
  // >= 2.0 centroid separation, so this reference should be near-perfect
  int correct = 0;
  for (std::size_t i = 0; i < tp.base_eval.size(); ++i) {
    Mat<D> mean = tp.base_eval.xs[i].colwise().mean();
    Index best = 0;
    double best_d = (mean.row(0) - tp.centroids.row(0)).squaredNorm();
    for (Index k = 1; k < tp.centroids.rows(); ++k) {
      const double d = (mean.row(0) - tp.centroids.row(k)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    correct += (static_cast<int>(best) == tp.base_eval.ys[i]);
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(tp.base_eval.size()) >=
        0.95);
}

TEST_CASE("task validation rejects bad sizes and impossible centroid layouts") {
  TrainConfig cfg = tiny_cfg();
  cfg.task.train_size = 0;
  CHECK_THROWS_AS(make_task(cfg.task, cfg.arch, 1), ConfigError);
  cfg = tiny_cfg();
  cfg.task.noise = -0.5;
  CHECK_THROWS_AS(make_task(cfg.task, cfg.arch, 1), ConfigError);

  // 40 points with pairwise distance 2 cannot fit on a radius-3 circle
  cfg = tiny_cfg();
  cfg.arch.out_dim = 40;
  cfg.arch.input_dim = 2;
  CHECK_THROWS_WITH_AS(make_task(cfg.task, cfg.arch, 1),
                       doctest::Contains("cannot place"), ConfigError);
}

// ----- config ---------------------------------------------------------------------

TEST_CASE("config defaults survive the dump/parse round trip byte for byte") {
  const TrainConfig defaults;
  const std::string d0 = dump_config(defaults);
  CHECK(dump_config(parse_config_text(d0)) == d0);
  CHECK(dump_config(parse_config_text("")) == d0);

  TrainConfig cfg = tiny_cfg();
  cfg.distill.lambda = 0.3;
  cfg.mode = TuneMode::partial;
  cfg.seed = 42;
  cfg.train.base_lr = 7.5e-4;
  cfg.train.schedule = SchedKind::cosine;
  const std::string d1 = dump_config(cfg);
  CHECK(dump_config(parse_config_text(d1)) == d1);
  CHECK(d1 != d0);
}

TEST_CASE("config parser reports unknown keys and bad values with line numbers") {
  CHECK_THROWS_WITH_AS(parse_config_text("arch.layers = 2\nbogus = 1\n"),
                       "line 2: unknown key 'bogus'", ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("arch.layers = x\n"),
                       "line 1: expected an integer for 'arch.layers', got 'x'",
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("distill.lambda = abc\n"),
                       "line 1: expected a number for 'distill.lambda', got 'abc'",
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("\n\njust words\n"),
                       "line 3: expected key = value", ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("= 4\n"), "line 1: missing key",
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("seed = -1\n"),
                       doctest::Contains("unsigned integer"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("mode = banana\n"),
                       doctest::Contains("unknown tuning mode 'banana'"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("arch.layers = 0\n"),
                       doctest::Contains("must be >= 1"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("distill.generation = yes\n"),
                       doctest::Contains("expected true or false"), ConfigError);
  CHECK_THROWS_AS(load_config_file("/nonexistent/path/run.cfg"), IoError);
}

TEST_CASE("config parser handles comments, blanks and last-wins duplicates") {
  const TrainConfig cfg = parse_config_text(
      "# a full-line comment\n"
      "\n"
      "arch.layers = 6   # trailing comment\n"
      "batch = 2\n"
      "batch = 3\n"
      "train.schedule = cosine\n"
      "distill.subset = deep_only\n"
      "distill.generation = 0\n"
      "mode = side_only\n");
  CHECK(cfg.arch.layers == 6);
  CHECK(cfg.batch == 3);
  CHECK(cfg.train.schedule == SchedKind::cosine);
  CHECK(cfg.distill.subset == LayerSubset::deep_only);
  CHECK(cfg.distill.generation == false);
  CHECK(cfg.mode == TuneMode::side_only);
  CHECK(cfg.distill_keys_set);

  // cross-field constraints surface at validate time as config errors
  TrainConfig bad = parse_config_text("arch.hidden = 30\narch.reduction = 4\n");
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("divisible"), ConfigError);
  bad = TrainConfig{};
  bad.batch = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config hash tracks content; warnings flag ignored distill settings") {
  const TrainConfig a;
  CHECK(config_hash(a).size() == 16);
  CHECK(config_hash(a) == config_hash(TrainConfig{}));
  TrainConfig b;
  set_config_key(b, "distill.lambda", "0.25");
  CHECK(config_hash(b) != config_hash(a));
  CHECK_THROWS_AS(set_config_key(b, "nope", "1"), ConfigError);

  CHECK(config_mode_warnings(a).empty());   // defaults: mdpd, nothing set
  CHECK(config_mode_warnings(b).empty());   // mdpd uses the distillation terms
  TrainConfig c = parse_config_text("mode = partial\ndistill.lambda = 0.75\n");
  const auto warnings = config_mode_warnings(c);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("partial") != std::string::npos);
  CHECK(config_mode_warnings(parse_config_text("mode = partial\n")).empty());
}

// ----- checkpoints ----------------------------------------------------------------

TEST_CASE("checkpoint round trip stores float32 exactly once") {
  Parameter<D> alpha("alpha", grid(2, 3, 0.731), true, Segment::backbone);
  Parameter<D> beta("beta", grid(1, 1, 3.14159), false, Segment::side);
  const std::string path = dir_for("ckpt_round.ckpt");
  save_checkpoint(path, {&alpha, &beta});

  const auto tensors = load_checkpoint(path);
  REQUIRE(tensors.size() == 2);
  CHECK(tensors[0].name == "alpha");
  CHECK(tensors[1].name == "beta");
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 3; ++j)
      CHECK(tensors[0].value(i, j) ==
            static_cast<D>(static_cast<float>(alpha.value(i, j))));

  // rewriting already-quantized values is byte-stable
  Parameter<D> alpha2("alpha", tensors[0].value, true, Segment::backbone);
  Parameter<D> beta2("beta", tensors[1].value, false, Segment::side);
  const std::string path2 = dir_for("ckpt_round2.ckpt");
  save_checkpoint(path2, {&alpha2, &beta2});
  CHECK(read_file(path) == read_file(path2));
}

TEST_CASE("load_into demands an exact name and shape match") {
  Parameter<D> alpha("alpha", grid(2, 3, 0.5), true, Segment::backbone);
  Parameter<D> beta("beta", grid(4, 1, -0.25), true, Segment::backbone);
  const std::string path = dir_for("ckpt_match.ckpt");
  save_checkpoint(path, {&alpha, &beta});

  Parameter<D> alpha_in("alpha", Mat<D>::Zero(2, 3), true, Segment::backbone);
  Parameter<D> beta_in("beta", Mat<D>::Zero(4, 1), true, Segment::backbone);
  load_into(path, {&alpha_in, &beta_in});
  CHECK(alpha_in.value(1, 2) == static_cast<D>(static_cast<float>(alpha.value(1, 2))));

  Parameter<D> gamma("gamma", Mat<D>::Zero(1, 1), true, Segment::backbone);
  CHECK_THROWS_WITH_AS(load_into(path, {&alpha_in, &beta_in, &gamma}),
                       doctest::Contains("missing tensor 'gamma'"), IoError);
  CHECK_THROWS_WITH_AS(load_into(path, {&alpha_in}),
                       doctest::Contains("unexpected tensor 'beta'"), IoError);
  Parameter<D> alpha_t("alpha", Mat<D>::Zero(3, 2), true, Segment::backbone);
  CHECK_THROWS_WITH_AS(load_into(path, {&alpha_t, &beta_in}),
                       doctest::Contains("model expects 3x2"), IoError);
}

TEST_CASE("corrupt checkpoints are rejected with specific errors") {
  Parameter<D> p("p", grid(2, 2, 1.0), true, Segment::none);
  const std::string good = dir_for("ckpt_good.ckpt");
  save_checkpoint(good, {&p});
  const std::string bytes = read_file(good);

  const std::string bad_magic = dir_for("ckpt_magic.ckpt");
  {
    std::ofstream out(bad_magic, std::ios::binary);
    out << "JUNK" << bytes.substr(4);
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(bad_magic), doctest::Contains("bad magic"),
                       IoError);

  const std::string truncated = dir_for("ckpt_trunc.ckpt");
  {
    std::ofstream out(truncated, std::ios::binary);
    out << bytes.substr(0, bytes.size() - 5);
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(truncated), doctest::Contains("truncated"),
                       IoError);

  const std::string versioned = dir_for("ckpt_version.ckpt");
  {
    std::string v = bytes;
    v[4] = 9;  // little-endian version word
    std::ofstream out(versioned, std::ios::binary);
    out << v;
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(versioned),
                       doctest::Contains("unsupported version 9"), IoError);

  Parameter<D> dup1("dup", grid(1, 2, 1.0), true, Segment::none);
  Parameter<D> dup2("dup", grid(1, 2, 2.0), true, Segment::none);
  const std::string dupped = dir_for("ckpt_dup.ckpt");
  save_checkpoint(dupped, {&dup1, &dup2});
  CHECK(load_checkpoint(dupped).size() == 2);  // reading is tolerant
  Parameter<D> dup_in("dup", Mat<D>::Zero(1, 2), true, Segment::none);
  CHECK_THROWS_WITH_AS(load_into(dupped, {&dup_in}),
                       doctest::Contains("repeats tensor 'dup'"), IoError);

  CHECK_THROWS_AS(load_checkpoint(dir_for("never_written.ckpt")), IoError);
}

TEST_CASE("file hashing matches a reference fnv-1a and sees single-byte flips") {
  const std::string path = dir_for("hash_me.bin");
  const std::string payload = "masked dual path\x00\x01\x7f fade";
  {
    std::ofstream out(path, std::ios::binary);
    out << payload;
  }
  CHECK(file_fnv1a(path) == fnv_of(payload));

  std::string flipped = payload;
  flipped[3] ^= 0x20;
  const std::string path2 = dir_for("hash_me2.bin");
  {
    std::ofstream out(path2, std::ios::binary);
    out << flipped;
  }
  CHECK(file_fnv1a(path) != file_fnv1a(path2));
  CHECK_THROWS_AS(file_fnv1a(dir_for("no_such_file.bin")), IoError);
}

// ----- run drivers ----------------------------------------------------------------

TEST_CASE("pretraining converges, writes its artifacts, and gates on accuracy") {
  const std::string ckpt = pretrained_ckpt();
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(dir_for("shared_pretrain") + "/records.ndjson"));
  CHECK(fs::exists(dir_for("shared_pretrain") + "/summary.csv"));

  // the convergence gate trips when the bar is unreachable
  TrainConfig cfg = tiny_cfg();
  cfg.train.total_steps = 2;
  RunLog log(dir_for("pretrain_gate"));
  CHECK_THROWS_WITH_AS(run_pretrain(cfg, log, 0.9),
                       doctest::Contains("pretraining stalled"),
                       ConvergenceFailure);
}

TEST_CASE("dual-path finetuning trains without touching frozen backbone weights") {
  const TrainConfig cfg = tiny_cfg();
  RunLog log(dir_for("ft_mdpd"));
  const RunOutput row = run_finetune(cfg, pretrained_ckpt(), log, "finetuned");
  log.write_summary();

  CHECK(row.mode == "mdpd");
  CHECK(row.faded_acc >= 0.9);
  REQUIRE(row.assisted_acc.has_value());
  CHECK(*row.assisted_acc >= 0.9);
  REQUIRE(row.flops_assisted.has_value());
  CHECK(*row.flops_assisted > row.flops_faded);
  CHECK(row.flops_faded == count_flops(cfg.arch).faded_total());

  // every backbone tensor outside the melt set is byte-identical to the
  // pretrained checkpoint
  auto before = load_checkpoint(pretrained_ckpt());
  auto after = load_checkpoint(log.dir() + "/finetuned.ckpt");
  std::set<std::string> frozen;
  {
    auto bb = build_backbone<D>(cfg.arch, cfg.seed);
    for (const auto* p : bb.frozen_under_mdpd()) frozen.insert(p->name);
  }
  REQUIRE(frozen.size() > 0);
  int compared = 0;
  for (const auto& b : before) {
    if (!frozen.count(b.name)) continue;
    for (const auto& a : after)
      if (a.name == b.name) {
        CHECK((a.value.array() == b.value.array()).all());
        ++compared;
      }
  }
  CHECK(compared == static_cast<int>(frozen.size()));
}

TEST_CASE("side-only fading equals the reinitialized-head baseline exactly") {
  TrainConfig cfg = tiny_cfg();
  cfg.mode = TuneMode::side_only;
  RunLog log(dir_for("ft_side_only"));
  const RunOutput row = run_finetune(cfg, pretrained_ckpt(), log, "finetuned");

  // baseline: pretrained backbone, fresh head, no training at all
  auto bb = build_backbone<D>(cfg.arch, cfg.seed);
  load_into(pretrained_ckpt(), bb.params());
  reinit_head(bb, cfg.seed);
  const TaskPair task = make_task(cfg.task, cfg.arch, cfg.seed);
  const EvalResult base = evaluate<D>(bb, nullptr, task.transfer_eval.xs,
                                      task.transfer_eval.ys, EvalPath::faded);
  CHECK(row.faded_acc == base.accuracy);

  REQUIRE(row.assisted_acc.has_value());
  CHECK(*row.assisted_acc >= 0.9);  // the side path did learn the task
}

TEST_CASE("identical finetune invocations produce identical rows and summaries") {
  const TrainConfig cfg = tiny_cfg();
  RunLog log_a(dir_for("det_a"));
  RunLog log_b(dir_for("det_b"));
  const RunOutput a = run_finetune(cfg, pretrained_ckpt(), log_a, "finetuned");
  const RunOutput b = run_finetune(cfg, pretrained_ckpt(), log_b, "finetuned");
  CHECK(same_rows(a, b));
  CHECK(RunLog::summary_csv({a}) == RunLog::summary_csv({b}));
  log_a.write_summary();
  log_b.write_summary();
  CHECK(read_file(dir_for("det_a") + "/summary.csv") ==
        read_file(dir_for("det_b") + "/summary.csv"));
  CHECK(read_file(dir_for("det_a") + "/finetuned.ckpt") ==
        read_file(dir_for("det_b") + "/finetuned.ckpt"));
}

TEST_CASE("ablation sweeps one key per run and evaluation reloads checkpoints") {
  TrainConfig cfg = tiny_cfg();
  cfg.train.total_steps = 12;  // sweep speed over accuracy here
  RunLog log(dir_for("ablate"));
  const auto rows =
      run_ablate(cfg, "distill.lambda", {"0.25", "0.75"}, pretrained_ckpt(), log);
  log.write_summary();
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].run_id == "distill.lambda=0.25");
  CHECK(rows[1].run_id == "distill.lambda=0.75");
  CHECK(rows[0].config_hash != rows[1].config_hash);
  CHECK(fs::exists(dir_for("ablate") + "/distill.lambda_0.25.ckpt"));

  CHECK_THROWS_AS(run_ablate(cfg, "distill.lambda", {}, pretrained_ckpt(), log),
                  ConfigError);
  CHECK_THROWS_AS(
      run_ablate(cfg, "no.such.key", {"1"}, pretrained_ckpt(), log), ConfigError);

  // reload the finetuned model and evaluate both paths, then only the faded one
  RunLog ft_log(dir_for("eval_src"));
  run_finetune(cfg, pretrained_ckpt(), ft_log, "finetuned");
  RunLog ev_log(dir_for("eval_out"));
  const RunOutput both = run_eval(cfg, ft_log.dir() + "/finetuned.ckpt",
                                  /*faded_only=*/false, /*base_split=*/false, ev_log);
  CHECK(both.assisted_acc.has_value());
  const RunOutput faded = run_eval(cfg, ft_log.dir() + "/finetuned.ckpt",
                                   /*faded_only=*/true, /*base_split=*/false, ev_log);
  CHECK_FALSE(faded.assisted_acc.has_value());
  CHECK(faded.faded_acc == both.faded_acc);
}

TEST_CASE("run log writes parseable records and fails loudly on bad directories") {
  RunLog log(dir_for("log_plumbing"));
  RunOutput row;
  row.run_id = "probe";
  row.mode = "mdpd";
  row.seed = 9;
  row.steps = 1;
  row.final_total = 0.5;
  row.faded_acc = 0.75;
  row.flops_faded = 123;
  row.config_hash = "deadbeefdeadbeef";
  log.step_record("probe", 0, 1e-3, 0.5, 0.4, 0.05, 0.03, 0.02);
  log.eval_record("probe", "faded", 0.75, 123, 8);
  log.run_record(row, 17.5);
  log.write_summary();

  std::ifstream in(dir_for("log_plumbing") + "/records.ndjson");
  std::string line;
  std::vector<std::string> types;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    types.push_back(j.at("type").get<std::string>());
    if (types.back() == "run") {
      CHECK(j.at("wall_ms").get<double>() == 17.5);
      CHECK(j.at("assisted_acc").is_null());
    }
  }
  CHECK(types == std::vector<std::string>{"step", "eval", "run"});

  const std::string summary = read_file(dir_for("log_plumbing") + "/summary.csv");
  CHECK(summary == RunLog::summary_csv({row}));
  CHECK(summary.find("wall") == std::string::npos);

  const std::string blocker = dir_for("blocker_file");
  std::ofstream(blocker) << "x";
  CHECK_THROWS_AS(RunLog(blocker + "/nested"), IoError);
}

TEST_CASE("head reinitialization is seeded and leaves the rest untouched") {
  const TrainConfig cfg = tiny_cfg();
  auto a = build_backbone<D>(cfg.arch, 1);
  auto b = build_backbone<D>(cfg.arch, 1);
  const Mat<D> emb_before = a.w_emb.value;
  reinit_head(a, 77);
  reinit_head(b, 77);
  CHECK((a.w_head.value.array() == b.w_head.value.array()).all());
  CHECK((a.w_emb.value.array() == emb_before.array()).all());
  reinit_head(b, 78);
  CHECK_FALSE((a.w_head.value.array() == b.w_head.value.array()).all());
}
