// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic tasks standing in for fine-tuning datasets.
//
// cluster_regression: x = mu_c + spread * z, cluster c uniform;
//   y = tanh(x (M0 + shift * S + specialization * D_c)) + noise * e
// Datasets generated with the same seed share mu, M0, S and D_c, so a task
// with shift = 0 can act as the pretraining distribution of one with
// shift > 0.
//
// modular_classification: one-hot(a) ++ one-hot(b) -> (a + b) mod m, with
// train/eval drawn from a disjoint split of all m^2 pairs.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ders/numkern.hpp"

namespace ders {

enum class TaskKind : std::uint8_t { cluster_regression = 0, modular_classification = 1 };

inline const char* task_kind_name(TaskKind k) noexcept {
  return k == TaskKind::cluster_regression ? "cluster_regression" : "modular_classification";
}

struct TaskParams {
  TaskKind kind = TaskKind::cluster_regression;
  std::size_t input_dim = 16;
  std::size_t output_dim = 4;
  std::size_t n_clusters = 4;
  double center_scale = 1.0;
  double cluster_spread = 0.5;
  double map_gain = 1.0;
  double shift = 0.0;
  double specialization = 1.0;
  double noise = 0.0;
  std::size_t modulus = 11;
  std::size_t n_train = 2048;
  std::size_t n_eval = 512;
  std::uint64_t seed = 0;
};

struct Dataset {
  Matrix x;
  Matrix y;                          // regression targets (empty for classification)
  std::vector<std::size_t> labels;   // classification labels
  std::vector<std::size_t> cluster;  // generating cluster (regression)
  std::size_t size() const noexcept { return x.rows(); }
};

struct SyntheticTask {
  TaskParams params;
  Dataset train;
  Dataset eval;

  bool classification() const noexcept { return params.kind == TaskKind::modular_classification; }
  std::size_t input_dim() const noexcept {
    return classification() ? 2 * params.modulus : params.input_dim;
  }
  std::size_t output_dim() const noexcept {
    return classification() ? params.modulus : params.output_dim;
  }
};

inline constexpr std::uint64_t kStreamTaskStructure = 0x7A51;
inline constexpr std::uint64_t kStreamTaskTrain = 0x7A52;
inline constexpr std::uint64_t kStreamTaskEval = 0x7A53;

inline void validate_task_params(const TaskParams& p) {
  if (p.n_train == 0 || p.n_eval == 0) throw ConfigError("task: n_train and n_eval must be > 0");
  if (p.kind == TaskKind::cluster_regression) {
    if (p.input_dim == 0 || p.output_dim == 0) throw ConfigError("task: dimensions must be > 0");
    if (p.n_clusters == 0) throw ConfigError("task: n_clusters must be > 0");
    if (!(p.cluster_spread >= 0.0) || !(p.noise >= 0.0))
      throw ConfigError("task: cluster_spread and noise must be >= 0");
  } else {
    if (p.modulus < 2) throw ConfigError("task: modulus must be >= 2");
    if (p.n_train + p.n_eval > p.modulus * p.modulus)
      throw ConfigError("task: n_train + n_eval = " + std::to_string(p.n_train + p.n_eval) +
                        " exceeds the " + std::to_string(p.modulus * p.modulus) + " distinct pairs");
  }
}

namespace detail {

struct ClusterStructure {
  std::vector<Matrix> centers;  // 1 x input_dim each
  std::vector<Matrix> maps;     // effective input_dim x output_dim per cluster
};

inline ClusterStructure cluster_structure(const TaskParams& p) {
  RngStream rng(p.seed, stream_id({kStreamTaskStructure}));
  auto normal_matrix = [&](std::size_t r, std::size_t c, double s) {
    Matrix m(r, c);
    for (double& v : m.data()) v = s * rng.normal();
    return m;
  };
  const double map_scale = p.map_gain / std::sqrt(static_cast<double>(p.input_dim));
  ClusterStructure cs;
  const Matrix shared = normal_matrix(p.input_dim, p.output_dim, map_scale);
  const Matrix shift = normal_matrix(p.input_dim, p.output_dim, map_scale);
  for (std::size_t c = 0; c < p.n_clusters; ++c) {
    cs.centers.push_back(normal_matrix(1, p.input_dim, p.center_scale));
    Matrix m = shared;
    add_inplace(m, shift, p.shift);
    add_inplace(m, normal_matrix(p.input_dim, p.output_dim, map_scale), p.specialization);
    cs.maps.push_back(std::move(m));
  }
  return cs;
}

inline Dataset cluster_samples(const TaskParams& p, const ClusterStructure& cs, std::size_t n,
                               std::uint64_t stream) {
  RngStream rng(p.seed, stream_id({stream}));
  Dataset ds;
  ds.x = Matrix(n, p.input_dim);
  ds.y = Matrix(n, p.output_dim);
  ds.cluster.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t c = rng.below(p.n_clusters);
    ds.cluster[t] = c;
    auto xr = ds.x.row(t);
    for (std::size_t j = 0; j < p.input_dim; ++j)
      xr[j] = cs.centers[c](0, j) + p.cluster_spread * rng.normal();
    const Matrix lin = matmul(Matrix::row_vector(xr), cs.maps[c]);
    for (std::size_t j = 0; j < p.output_dim; ++j) {
      ds.y(t, j) = std::tanh(lin(0, j)) + (p.noise > 0.0 ? p.noise * rng.normal() : 0.0);
    }
  }
  return ds;
}

inline Dataset modular_samples(const TaskParams& p, const std::vector<std::size_t>& pairs) {
  const std::size_t m = p.modulus;
  Dataset ds;
  ds.x = Matrix(pairs.size(), 2 * m);
  ds.labels.resize(pairs.size());
  for (std::size_t t = 0; t < pairs.size(); ++t) {
    const std::size_t a = pairs[t] / m;
    const std::size_t b = pairs[t] % m;
    ds.x(t, a) = 1.0;
    ds.x(t, m + b) = 1.0;
    ds.labels[t] = (a + b) % m;
  }
  return ds;
}

}  // namespace detail

inline SyntheticTask make_task(const TaskParams& params) {
  validate_task_params(params);
  SyntheticTask task;
  task.params = params;
  if (params.kind == TaskKind::cluster_regression) {
    const auto cs = detail::cluster_structure(params);
    task.train = detail::cluster_samples(params, cs, params.n_train, kStreamTaskTrain);
    task.eval = detail::cluster_samples(params, cs, params.n_eval, kStreamTaskEval);
  } else {
    std::vector<std::size_t> pairs(params.modulus * params.modulus);
    for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i] = i;
    RngStream rng(params.seed, stream_id({kStreamTaskStructure}));
    rng.shuffle(pairs);
    task.train = detail::modular_samples(
        params, {pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(params.n_train)});
    task.eval = detail::modular_samples(
        params, {pairs.begin() + static_cast<std::ptrdiff_t>(params.n_train),
                 pairs.begin() + static_cast<std::ptrdiff_t>(params.n_train + params.n_eval)});
  }
  return task;
}

}  // namespace ders
