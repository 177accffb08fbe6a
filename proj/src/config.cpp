#include "mdpd/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mdpd/errors.hpp"

namespace mdpd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

LayerSubset subset_from_string(const std::string& s) {
  if (s == "all") return LayerSubset::all;
  if (s == "shallow_only") return LayerSubset::shallow_only;
  if (s == "deep_only") return LayerSubset::deep_only;
  throw std::invalid_argument("unknown layer subset '" + s +
                              "' (expected all, shallow_only or deep_only)");
}

long long parse_int(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty())
    throw ConfigError("expected an integer for '" + key + "', got '" + value + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty() || value[0] == '-')
    throw ConfigError("expected an unsigned integer for '" + key + "', got '" +
                      value + "'");
  return v;
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty())
    throw ConfigError("expected a number for '" + key + "', got '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("expected true or false for '" + key + "', got '" + value + "'");
}

}  // namespace

void TrainConfig::validate() const {
  try {
    arch.validate();
    distill.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  task.validate();
  if (batch < 1) throw ConfigError("batch must be >= 1");
}

void set_config_key(TrainConfig& cfg, const std::string& key, const std::string& value) {
  auto as_int = [&](int lo) {
    const long long v = parse_int(key, value);
    if (v < lo)
      throw ConfigError("'" + key + "' must be >= " + std::to_string(lo) +
                        ", got " + value);
    return static_cast<int>(v);
  };
  try {
    if (key == "arch.layers") cfg.arch.layers = as_int(1);
    else if (key == "arch.tokens") cfg.arch.tokens = as_int(1);
    else if (key == "arch.hidden") cfg.arch.hidden = as_int(1);
    else if (key == "arch.reduction") cfg.arch.reduction = as_int(1);
    else if (key == "arch.out_dim") cfg.arch.out_dim = as_int(2);
    else if (key == "arch.mlp_ratio") cfg.arch.mlp_ratio = as_int(1);
    else if (key == "arch.input_dim") cfg.arch.input_dim = as_int(1);
    else if (key == "distill.lambda") { cfg.distill.lambda = parse_double(key, value); cfg.distill_keys_set = true; }
    else if (key == "distill.rank") { cfg.distill.rank = as_int(1); cfg.distill_keys_set = true; }
    else if (key == "distill.w_sft") { cfg.distill.w_sft = parse_double(key, value); cfg.distill_keys_set = true; }
    else if (key == "distill.w_log") { cfg.distill.w_log = parse_double(key, value); cfg.distill_keys_set = true; }
    else if (key == "distill.w_deep") { cfg.distill.w_deep = parse_double(key, value); cfg.distill_keys_set = true; }
    else if (key == "distill.w_sha") { cfg.distill.w_sha = parse_double(key, value); cfg.distill_keys_set = true; }
    else if (key == "distill.subset") { cfg.distill.subset = subset_from_string(value); cfg.distill_keys_set = true; }
    else if (key == "distill.generation") { cfg.distill.generation = parse_bool(key, value); cfg.distill_keys_set = true; }
    else if (key == "distill.task_on_backbone") { cfg.distill.task_on_backbone = parse_bool(key, value); cfg.distill_keys_set = true; }
    else if (key == "optim.beta1") cfg.train.optim.beta1 = parse_double(key, value);
    else if (key == "optim.beta2") cfg.train.optim.beta2 = parse_double(key, value);
    else if (key == "optim.eps") cfg.train.optim.eps = parse_double(key, value);
    else if (key == "optim.weight_decay") cfg.train.optim.weight_decay = parse_double(key, value);
    else if (key == "train.schedule") cfg.train.schedule = sched_from_string(value);
    else if (key == "train.warmup_frac") cfg.train.warmup_frac = parse_double(key, value);
    else if (key == "train.base_lr") cfg.train.base_lr = parse_double(key, value);
    else if (key == "train.steps") cfg.train.total_steps = parse_int(key, value);
    else if (key == "task.train_size") cfg.task.train_size = as_int(1);
    else if (key == "task.eval_size") cfg.task.eval_size = as_int(1);
    else if (key == "task.noise") cfg.task.noise = parse_double(key, value);
    else if (key == "mode") cfg.mode = tune_mode_from_string(value);
    else if (key == "batch") cfg.batch = as_int(1);
    else if (key == "seed") cfg.seed = parse_u64(key, value);
    else throw ConfigError("unknown key '" + key + "'");
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string(e.what()) + " for '" + key + "'");
  }
}

TrainConfig parse_config_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": missing key");
    try {
      set_config_key(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

TrainConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("failed reading config file '" + path + "'");
  return parse_config_text(buf.str());
}

std::string dump_config(const TrainConfig& cfg) {
  std::ostringstream out;
  auto put = [&](const char* key, const std::string& value) {
    out << key << " = " << value << "\n";
  };
  put("arch.layers", std::to_string(cfg.arch.layers));
  put("arch.tokens", std::to_string(cfg.arch.tokens));
  put("arch.hidden", std::to_string(cfg.arch.hidden));
  put("arch.reduction", std::to_string(cfg.arch.reduction));
  put("arch.out_dim", std::to_string(cfg.arch.out_dim));
  put("arch.mlp_ratio", std::to_string(cfg.arch.mlp_ratio));
  put("arch.input_dim", std::to_string(cfg.arch.input_dim));
  put("distill.lambda", fmt_double(cfg.distill.lambda));
  put("distill.rank", std::to_string(cfg.distill.rank));
  put("distill.w_sft", fmt_double(cfg.distill.w_sft));
  put("distill.w_log", fmt_double(cfg.distill.w_log));
  put("distill.w_deep", fmt_double(cfg.distill.w_deep));
  put("distill.w_sha", fmt_double(cfg.distill.w_sha));
  put("distill.subset", to_string(cfg.distill.subset));
  put("distill.generation", cfg.distill.generation ? "true" : "false");
  put("distill.task_on_backbone", cfg.distill.task_on_backbone ? "true" : "false");
  put("optim.beta1", fmt_double(cfg.train.optim.beta1));
  put("optim.beta2", fmt_double(cfg.train.optim.beta2));
  put("optim.eps", fmt_double(cfg.train.optim.eps));
  put("optim.weight_decay", fmt_double(cfg.train.optim.weight_decay));
  put("train.schedule", to_string(cfg.train.schedule));
  put("train.warmup_frac", fmt_double(cfg.train.warmup_frac));
  put("train.base_lr", fmt_double(cfg.train.base_lr));
  put("train.steps", std::to_string(cfg.train.total_steps));
  put("task.train_size", std::to_string(cfg.task.train_size));
  put("task.eval_size", std::to_string(cfg.task.eval_size));
  put("task.noise", fmt_double(cfg.task.noise));
  put("mode", to_string(cfg.mode));
  put("batch", std::to_string(cfg.batch));
  put("seed", std::to_string(cfg.seed));
  return out.str();
}

std::string config_hash(const TrainConfig& cfg) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : dump_config(cfg)) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> config_mode_warnings(const TrainConfig& cfg) {
  std::vector<std::string> w;
  if (cfg.distill_keys_set && !mode_uses_distill(cfg.mode))
    w.push_back("mode '" + std::string(to_string(cfg.mode)) +
                "' runs without distillation; distill.* settings have no effect");
  return w;
}

}  // namespace mdpd
