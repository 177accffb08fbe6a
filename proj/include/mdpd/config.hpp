#pragma once

// Flat key=value run configuration: one struct bundling architecture,
// distillation, optimizer, schedule and task settings, a canonical text dump
// (stable field order, %.17g numerics) and a line-oriented parser whose
// errors carry line numbers. dump/parse round-trip exactly.

#include <cstdint>
#include <string>
#include <vector>

#include "mdpd/distill.hpp"
#include "mdpd/task.hpp"
#include "mdpd/trainer.hpp"

namespace mdpd {

struct TrainConfig {
  ArchSpec arch;
  DistillConfig distill;
  TrainHyper train;
  TaskConfig task;
  TuneMode mode = TuneMode::mdpd;
  int batch = 8;
  std::uint64_t seed = 1;

  // Set by the parser when any distill.* key appears; used only to warn when
  // such keys cannot affect the selected mode. Not part of the dump.
  bool distill_keys_set = false;

  void validate() const;
};

// Assign one key. Throws ConfigError on an unknown key or unparsable value.
void set_config_key(TrainConfig& cfg, const std::string& key, const std::string& value);

// Parse "key = value" lines ('#' starts a comment, later keys win). Errors
// are reported as "line N: ...".
TrainConfig parse_config_text(const std::string& text);

// Read and parse a file; missing or unreadable files raise IoError.
TrainConfig load_config_file(const std::string& path);

// Canonical text form, suitable both for reproducing a run and for hashing.
std::string dump_config(const TrainConfig& cfg);

// FNV-1a over the canonical dump, as 16 hex digits.
std::string config_hash(const TrainConfig& cfg);

// Human-readable notes about settings the selected mode will ignore.
std::vector<std::string> config_mode_warnings(const TrainConfig& cfg);

}  // namespace mdpd
