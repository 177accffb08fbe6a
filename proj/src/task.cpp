#include "mdpd/task.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "mdpd/errors.hpp"
#include "mdpd/rng.hpp"

namespace mdpd {

void TaskConfig::validate() const {
  if (train_size < 1) throw ConfigError("task.train_size must be >= 1");
  if (eval_size < 1) throw ConfigError("task.eval_size must be >= 1");
  if (noise < 0.0) throw ConfigError("task.noise must be >= 0");
}

namespace {

constexpr double kRadius = 3.0;
constexpr double kMinSeparation = 2.0;

Mat<double> draw_centroids(int classes, int dim, Rng& rng) {
  Mat<double> c(classes, dim);
  for (int k = 0; k < classes; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 10000 && !placed; ++attempt) {
      Mat<double> v(1, dim);
      double norm2 = 0.0;
      for (int j = 0; j < dim; ++j) {
        v(0, j) = rng.gaussian();
        norm2 += v(0, j) * v(0, j);
      }
      if (norm2 == 0.0) continue;
      v *= kRadius / std::sqrt(norm2);
      placed = true;
      for (int p = 0; p < k && placed; ++p)
        placed = (c.row(p) - v.row(0)).norm() >= kMinSeparation;
      if (placed) c.row(k) = v.row(0);
    }
    if (!placed)
      throw ConfigError("task: cannot place " + std::to_string(classes) +
                        " separated class centroids in " + std::to_string(dim) +
                        " dimensions");
  }
  return c;
}

Dataset draw_dataset(const Mat<double>& centroids, const std::vector<int>& label_map,
                     int n, int tokens, double noise, Rng& rng) {
  Dataset d;
  d.classes = static_cast<int>(centroids.rows());
  d.xs.reserve(static_cast<std::size_t>(n));
  d.ys.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int base = i % d.classes;  // balanced classes
    Mat<double> x(tokens, centroids.cols());
    for (int t = 0; t < tokens; ++t) {
      x.row(t) = centroids.row(base);
      for (Index j = 0; j < centroids.cols(); ++j)
        x(t, j) += noise * rng.gaussian();
    }
    d.xs.push_back(std::move(x));
    d.ys.push_back(label_map[static_cast<std::size_t>(base)]);
  }
  return d;
}

std::vector<int> draw_permutation(int classes, Rng& rng) {
  std::vector<int> p(static_cast<std::size_t>(classes));
  std::iota(p.begin(), p.end(), 0);
  std::vector<int> identity = p;
  do {
    for (int i = classes - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(p[static_cast<std::size_t>(i)], p[j]);
    }
  } while (p == identity);  // a transfer task must actually move the labels
  return p;
}

}  // namespace

TaskPair make_task(const TaskConfig& cfg, const ArchSpec& arch, std::uint64_t seed) {
  cfg.validate();
  arch.validate();
  const int classes = arch.out_dim;

  TaskPair tp;
  {
    Rng rng(derive_seed(seed, 0xce47));
    tp.centroids = draw_centroids(classes, arch.input_dim, rng);
  }
  {
    Rng rng(derive_seed(seed, 0x9e12));
    tp.permutation = draw_permutation(classes, rng);
  }
  std::vector<int> identity(static_cast<std::size_t>(classes));
  std::iota(identity.begin(), identity.end(), 0);

  Rng r1(derive_seed(seed, 0x00b7));
  tp.base_train = draw_dataset(tp.centroids, identity, cfg.train_size, arch.tokens,
                               cfg.noise, r1);
  Rng r2(derive_seed(seed, 0x00be));
  tp.base_eval = draw_dataset(tp.centroids, identity, cfg.eval_size, arch.tokens,
                              cfg.noise, r2);
  Rng r3(derive_seed(seed, 0x0077));
  tp.transfer_train = draw_dataset(tp.centroids, tp.permutation, cfg.train_size,
                                   arch.tokens, cfg.noise, r3);
  Rng r4(derive_seed(seed, 0x007e));
  tp.transfer_eval = draw_dataset(tp.centroids, tp.permutation, cfg.eval_size,
                                  arch.tokens, cfg.noise, r4);
  return tp;
}

}  // namespace mdpd
