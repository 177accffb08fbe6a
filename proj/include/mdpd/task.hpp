#pragma once

// Synthetic classification task pair for desk-scale experiments: class
// centroids on a radius-3 sphere, token sequences as noisy copies of the
// centroid, and a transfer variant of the same domain with permuted labels
// and fresh noise.

#include <cstdint>
#include <vector>

#include "mdpd/model.hpp"

namespace mdpd {

struct TaskConfig {
  int train_size = 256;
  int eval_size = 500;
  double noise = 1.0;

  void validate() const;
};

struct Dataset {
  std::vector<Mat<double>> xs;  // each tokens x input_dim
  std::vector<int> ys;
  int classes = 0;

  std::size_t size() const { return xs.size(); }
};

struct TaskPair {
  Dataset base_train, base_eval;          // pretraining task
  Dataset transfer_train, transfer_eval;  // same centroids, permuted labels
  Mat<double> centroids;                  // classes x input_dim
  std::vector<int> permutation;           // transfer label of base class k
};

TaskPair make_task(const TaskConfig& cfg, const ArchSpec& arch, std::uint64_t seed);

}  // namespace mdpd
