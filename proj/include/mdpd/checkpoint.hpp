#pragma once

// Minimal named-tensor checkpoint: fixed magic, explicit little-endian
// integers, float32 row-major payloads. Values survive a save/load cycle as
// double(float(x)); loading into a model demands an exact name-set match.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mdpd/params.hpp"

namespace mdpd {

inline constexpr char kCheckpointMagic[4] = {'M', 'D', 'P', 'D'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Mat<double> value;
};

void save_checkpoint(const std::string& path,
                     const std::vector<Parameter<double>*>& params);

// Tensors in file order. Raises IoError on a missing file, bad magic,
// unsupported version or truncation.
std::vector<NamedTensor> load_checkpoint(const std::string& path);

// Copy checkpoint values into the given parameters. The two name sets must
// match exactly (same names, same shapes), else IoError.
void load_into(const std::string& path,
               const std::vector<Parameter<double>*>& params);

// FNV-1a of a file's raw bytes; handy for bit-identity checks.
std::uint64_t file_fnv1a(const std::string& path);

}  // namespace mdpd
