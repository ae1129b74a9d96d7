// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense -> MoE conversion.
//
//  vanilla : every expert starts as an exact copy of the dense FFN. Stored as
//            the copied weight (kept frozen as the init record) plus N
//            trainable dense deltas initialised to zero.
//  ders-sm : trainable shared weight + N sparse (index, value) deltas.
//  ders-lm : trainable shared weight + N low-rank A*B deltas (B = 0).
//
// With `extended`, the parallel universal FFN joins the group as member N
// instead of being a separate full copy.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ders/deltas.hpp"
#include "ders/moe.hpp"

namespace ders {

enum class UpcycleMethod : std::uint8_t { vanilla = 0, ders_sm = 1, ders_lm = 2 };
enum class LayerPattern : std::uint8_t { every_layer = 0, every_other_layer = 1 };

inline const char* method_name(UpcycleMethod m) noexcept {
  switch (m) {
    case UpcycleMethod::vanilla: return "vanilla";
    case UpcycleMethod::ders_sm: return "ders-sm";
    case UpcycleMethod::ders_lm: return "ders-lm";
  }
  return "?";
}

struct UpcycleConfig {
  std::size_t n_experts = 4;
  std::size_t topk_count = 2;
  double sparse_rate = 0.9;
  std::size_t rank = 4;
  UpcycleMethod method = UpcycleMethod::vanilla;
  LayerPattern layer_pattern = LayerPattern::every_layer;
  bool parallel_universal = false;
  bool extended = false;
  bool freeze_shared = false;
  std::uint64_t seed = 0;
  // Half-width of the uniform init of low-rank A; default 1/sqrt(d).
  std::optional<double> lowrank_init_scale;
};

// Stream-id purposes.
inline constexpr std::uint64_t kStreamRouter = 1;
inline constexpr std::uint64_t kStreamDelta = 2;

inline void validate_upcycle_config(const UpcycleConfig& cfg, std::size_t d, std::size_t d_h) {
  if (cfg.n_experts < 1) throw ConfigError("upcycle: n_experts must be >= 1");
  if (cfg.topk_count < 1 || cfg.topk_count > cfg.n_experts)
    throw ConfigError("upcycle: topk_count " + std::to_string(cfg.topk_count) +
                      " outside [1, n_experts=" + std::to_string(cfg.n_experts) + "]");
  if (cfg.extended && !cfg.parallel_universal)
    throw ConfigError("upcycle: extended requires parallel_universal");
  if (cfg.method == UpcycleMethod::ders_sm && !(cfg.sparse_rate >= 0.0 && cfg.sparse_rate < 1.0))
    throw ConfigError("upcycle: sparse_rate " + std::to_string(cfg.sparse_rate) +
                      " outside [0, 1)");
  if (cfg.method == UpcycleMethod::ders_lm && (cfg.rank < 1 || cfg.rank > std::min(d, d_h)))
    throw ConfigError("upcycle: rank " + std::to_string(cfg.rank) + " outside [1, " +
                      std::to_string(std::min(d, d_h)) + "]");
}

/// Indices of the blocks that the pattern turns into MoE layers.
inline std::vector<std::size_t> selected_blocks(const Model& dense, LayerPattern pattern) {
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < dense.blocks.size(); ++b) {
    if (pattern == LayerPattern::every_other_layer && b % 2 == 0) continue;
    out.push_back(b);
  }
  return out;
}

namespace detail {

inline DeltaWeight make_trainable_delta(const UpcycleConfig& cfg, std::size_t rows,
                                        std::size_t cols, std::size_t layer, std::size_t matrix,
                                        std::size_t member) {
  RngStream rng(cfg.seed, stream_id({kStreamDelta, layer, matrix, member}));
  switch (cfg.method) {
    case UpcycleMethod::vanilla:
      return DenseDelta{Matrix(rows, cols)};
    case UpcycleMethod::ders_sm:
      try {
        return init_sparse_trainable(rows, cols, cfg.sparse_rate, rng);
      } catch (const ParameterError& e) {
        throw ConfigError(e.what());
      }
    case UpcycleMethod::ders_lm:
      return init_lowrank_trainable(rows, cols, cfg.rank, rng,
                                    cfg.lowrank_init_scale.value_or(default_lowrank_init_scale(rows)));
  }
  throw ConfigError("upcycle: unknown method");
}

}  // namespace detail

/// Builds the MoE layer that replaces `ffn` at block `layer_index`.
inline MoELayer upcycle_layer(const FFN& ffn, const UpcycleConfig& cfg, std::size_t layer_index) {
  const std::size_t d = ffn.w_in.rows();
  const std::size_t d_h = ffn.w_in.cols();
  validate_upcycle_config(cfg, d, d_h);

  MoELayer layer;
  layer.n_experts = cfg.n_experts;
  layer.activation = ffn.activation;
  layer.router.topk_count = cfg.topk_count;
  RngStream router_rng(cfg.seed, stream_id({kStreamRouter, layer_index}));
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  layer.router.w_r = uniform_matrix(d, cfg.n_experts, -s, s, router_rng);

  layer.w_in.base = ffn.w_in;
  layer.w_out.base = ffn.w_out;

  const bool fold_universal = cfg.parallel_universal && cfg.extended &&
                              cfg.method != UpcycleMethod::vanilla;
  const std::size_t members = cfg.n_experts + (fold_universal ? 1 : 0);
  for (std::size_t e = 0; e < members; ++e) {
    layer.w_in.deltas.push_back(detail::make_trainable_delta(cfg, d, d_h, layer_index, 0, e));
    layer.w_out.deltas.push_back(detail::make_trainable_delta(cfg, d_h, d, layer_index, 1, e));
  }
  layer.extended = fold_universal;
  if (cfg.parallel_universal && !fold_universal) layer.universal = ffn;

  switch (cfg.method) {
    case UpcycleMethod::vanilla:
      layer.origin = LayerOrigin::vanilla;
      layer.shared_trainable = false;
      break;
    case UpcycleMethod::ders_sm:
      layer.origin = LayerOrigin::ders_sm;
      layer.shared_trainable = !cfg.freeze_shared;
      break;
    case UpcycleMethod::ders_lm:
      layer.origin = LayerOrigin::ders_lm;
      layer.shared_trainable = !cfg.freeze_shared;
      break;
  }
  return layer;
}

/// Upcycles the blocks selected by cfg.layer_pattern using cfg.method.
inline Model upcycle(const Model& dense, const UpcycleConfig& cfg) {
  validate_upcycle_config(cfg, dense.d, dense.d_h);
  const auto blocks = selected_blocks(dense, cfg.layer_pattern);
  if (blocks.empty()) {
    throw ConfigError("upcycle: layer pattern selects no blocks in a " +
                      std::to_string(dense.blocks.size()) + "-block model");
  }
  Model out = dense;
  for (std::size_t b : blocks) {
    const auto* ffn = std::get_if<FFN>(&dense.blocks[b]);
    if (!ffn) throw ConfigError("upcycle: block " + std::to_string(b) + " is already a MoE layer");
    out.blocks[b] = upcycle_layer(*ffn, cfg, b);
  }
  out.seeds["upcycle"] = cfg.seed;
  return out;
}

inline Model vanilla_upcycle(const Model& dense, const UpcycleConfig& cfg) {
  if (cfg.method != UpcycleMethod::vanilla) throw ConfigError("vanilla_upcycle: method must be vanilla");
  return upcycle(dense, cfg);
}

inline Model ders_sm_upcycle(const Model& dense, const UpcycleConfig& cfg) {
  if (cfg.method != UpcycleMethod::ders_sm) throw ConfigError("ders_sm_upcycle: method must be ders-sm");
  return upcycle(dense, cfg);
}

inline Model ders_lm_upcycle(const Model& dense, const UpcycleConfig& cfg) {
  if (cfg.method != UpcycleMethod::ders_lm) throw ConfigError("ders_lm_upcycle: method must be ders-lm");
  return upcycle(dense, cfg);
}

}  // namespace ders
