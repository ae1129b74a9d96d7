// SPDX-License-Identifier: Apache-2.0
#pragma once

// Post-training compression of vanilla-upcycled models:
//   1. decompose each trained expert against the recorded init weight,
//   2. replace the delta by a sparse or quantised form,
//   3. synthesise experts on demand during forward.

#include <cstdint>
#include <string>
#include <vector>

#include "ders/deltas.hpp"
#include "ders/moe.hpp"
#include "ders/params.hpp"

namespace ders {

enum class CompressTechnique : std::uint8_t {
  dense = 0,     // keep the exact delta (lossless path)
  sparsify = 1,  // random drop with 1/(1-p) rescale
  quantize = 2,  // k-bit per-matrix quantisation
};

inline const char* technique_name(CompressTechnique t) noexcept {
  switch (t) {
    case CompressTechnique::dense: return "dense";
    case CompressTechnique::sparsify: return "sparsify";
    case CompressTechnique::quantize: return "quantize";
  }
  return "?";
}

struct CompressionSpec {
  CompressTechnique technique = CompressTechnique::sparsify;
  double drop_rate = 0.9;
  unsigned bit_width = 2;
  bool extended = false;
  std::uint64_t seed = 0;
  MaskMode mask = MaskMode::bernoulli;
};

inline constexpr std::uint64_t kStreamCompress = 3;

inline void validate_compression_spec(const CompressionSpec& spec) {
  if (spec.technique == CompressTechnique::sparsify &&
      !(spec.drop_rate >= 0.0 && spec.drop_rate < 1.0))
    throw ConfigError("compress: drop_rate " + std::to_string(spec.drop_rate) + " outside [0, 1)");
  if (spec.technique == CompressTechnique::quantize && !supported_bit_width(spec.bit_width))
    throw ConfigError("compress: bit_width " + std::to_string(spec.bit_width) +
                      " not in {1, 2, 4, 8, 16}");
}

struct LayerBase {
  std::size_t block = 0;
  Matrix w_in;
  Matrix w_out;
};

/// The recorded upcycle-time FFN weights of every MoE layer.
inline std::vector<LayerBase> choose_base(const Model& model) {
  std::vector<LayerBase> out;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto* layer = std::get_if<MoELayer>(&model.blocks[b]);
    if (!layer) continue;
    if (!layer->holds_init_base()) {
      throw StateError("block " + std::to_string(b) + " (" + origin_name(layer->origin) +
                       ") has no init-base record: not a vanilla-upcycled checkpoint");
    }
    out.push_back(LayerBase{b, layer->w_in.base, layer->w_out.base});
  }
  if (out.empty()) throw StateError("model has no MoE layers: not a vanilla-upcycled checkpoint");
  return out;
}

struct CompressionLayerReport {
  std::size_t block = 0;
  std::size_t deltas_per_matrix = 0;
  std::uint64_t stored_values_before = 0;  // parameter values (floats or codes)
  std::uint64_t stored_values_after = 0;
  std::uint64_t stored_bits_before = 0;    // parameter bits at K per float
  std::uint64_t stored_bits_after = 0;
  std::uint64_t overhead_bits_after = 0;   // indices and per-delta scalars
  double equivalent_expert_ratio = 0.0;    // expert-group bits after / N*K*d*d_h
};

struct CompressionReport {
  CompressionSpec spec;
  unsigned original_bits = 64;
  std::vector<CompressionLayerReport> layers;
};

namespace detail {

inline DeltaWeight replace_delta(const DenseDelta& delta, const CompressionSpec& spec,
                                 std::size_t block, std::size_t matrix, std::size_t member) {
  switch (spec.technique) {
    case CompressTechnique::dense:
      return delta;
    case CompressTechnique::sparsify: {
      RngStream rng(spec.seed, stream_id({kStreamCompress, block, matrix, member}));
      return sparsify(delta, spec.drop_rate, rng, spec.mask);
    }
    case CompressTechnique::quantize:
      return quantize(delta, spec.bit_width);
  }
  throw ConfigError("compress: unknown technique");
}

struct GroupBits {
  std::uint64_t values = 0;
  std::uint64_t bits = 0;
  std::uint64_t overhead_bits = 0;
  std::uint64_t dense_size = 0;  // d*d_h summed over the group's matrices
};

inline GroupBits group_bits(const Model& model, std::size_t block, unsigned original_bits,
                            bool include_universal) {
  GroupBits g;
  for_each_array(model, [&](const ArrayView& a) {
    if (a.block != block) return;
    const bool counted = a.in_group || (include_universal && a.universal);
    if (!counted) return;
    const unsigned bits = a.bits == 0 ? original_bits : a.bits;
    if (a.role == ArrayRole::param) {
      g.values += a.count;
      g.bits += static_cast<std::uint64_t>(a.count) * bits;
    } else if (a.role == ArrayRole::index || a.role == ArrayRole::scale) {
      g.overhead_bits += static_cast<std::uint64_t>(a.count) * bits;
    }
  });
  const auto& layer = std::get<MoELayer>(model.blocks[block]);
  g.dense_size = layer.w_in.base.size() + layer.w_out.base.size();
  return g;
}

}  // namespace detail

/// Compresses every MoE layer of a vanilla-upcycled model. With
/// spec.extended, the parallel universal FFN is decomposed against the same
/// base and stored as member N.
inline Model ders_compress(const Model& model, const CompressionSpec& spec,
                           CompressionReport* report = nullptr,
                           unsigned original_bits = dtype_bits(default_dtype())) {
  validate_compression_spec(spec);
  const std::vector<LayerBase> bases = choose_base(model);
  Model out = model;
  if (report) {
    report->spec = spec;
    report->original_bits = original_bits;
    report->layers.clear();
  }

  for (const LayerBase& lb : bases) {
    auto& layer = std::get<MoELayer>(out.blocks[lb.block]);
    if (spec.extended && !layer.universal && !layer.extended) {
      throw StateError("block " + std::to_string(lb.block) +
                       ": extended compression requires a parallel universal FFN");
    }
    CompressionLayerReport lr;
    lr.block = lb.block;
    if (report) {
      const auto before = detail::group_bits(model, lb.block, original_bits, spec.extended);
      lr.stored_values_before = before.values;
      lr.stored_bits_before = before.bits;
    }

    const std::size_t n = layer.n_experts;
    auto compress_group = [&](ExpertGroup& group, const Matrix& base, std::size_t matrix,
                              const Matrix* universal_weight) {
      std::vector<DeltaWeight> replaced;
      const std::size_t members = layer.member_count();
      for (std::size_t e = 0; e < members; ++e) {
        // Folded universal members are only recompressed in extended mode.
        if (layer.extended && e == n && !spec.extended) {
          replaced.push_back(group.deltas[e]);
          continue;
        }
        const Matrix trained = synthesize(group.base, group.deltas[e]);
        replaced.push_back(detail::replace_delta(decompose(base, trained), spec, lb.block, matrix, e));
      }
      if (universal_weight) {
        replaced.push_back(
            detail::replace_delta(decompose(base, *universal_weight), spec, lb.block, matrix, n));
      }
      group.base = base;
      group.deltas = std::move(replaced);
    };

    const bool fold = spec.extended && layer.universal.has_value();
    compress_group(layer.w_in, lb.w_in, 0, fold ? &layer.universal->w_in : nullptr);
    compress_group(layer.w_out, lb.w_out, 1, fold ? &layer.universal->w_out : nullptr);
    if (fold) {
      layer.universal.reset();
      layer.extended = true;
    }
    layer.origin = LayerOrigin::compressed;
    layer.shared_trainable = false;

    if (report) {
      const auto after = detail::group_bits(out, lb.block, original_bits, spec.extended);
      lr.deltas_per_matrix = layer.w_in.deltas.size();
      lr.stored_values_after = after.values;
      lr.stored_bits_after = after.bits;
      lr.overhead_bits_after = after.overhead_bits;
      lr.equivalent_expert_ratio =
          static_cast<double>(after.bits) /
          (static_cast<double>(layer.member_count()) * original_bits * after.dense_size);
      report->layers.push_back(lr);
    }
  }
  out.seeds["compress"] = spec.seed;
  return out;
}

}  // namespace ders
