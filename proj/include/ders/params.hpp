// SPDX-License-Identifier: Apache-2.0
#pragma once

// Enumeration of every stored array of a model, with its role, bit cost and
// trainability. Parameter accounting and the optimiser both walk models
// through here, so "what is trainable" is decided in one place.

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "ders/moe.hpp"

namespace ders {

enum class ArrayRole : std::uint8_t {
  param,        // values that parameterise the forward pass (floats or codes)
  index,        // u32 sparse positions
  scale,        // per-delta scalars: quantisation scale, sparse rescale
  init_record,  // upcycle-time FFN weight kept only for decomposition
};

/// Which matrix of an FFN an array belongs to (for per-matrix accounting).
enum class MatrixSlot : std::uint8_t { none, w_in, w_out };

struct ArrayView {
  std::string name{};
  ArrayRole role = ArrayRole::param;
  MatrixSlot slot = MatrixSlot::none;
  std::size_t block = SIZE_MAX;  // SIZE_MAX for embed/readout
  bool in_group = false;         // part of an ExpertGroup (base or delta)
  bool router = false;
  bool universal = false;
  bool trainable = false;
  std::size_t count = 0;
  // Bits per entry; 0 means "original dtype width K" (resolved by the caller).
  unsigned bits = 0;
  // Mutable float data for trainable or float arrays; empty for codes/indices.
  std::span<double> data{};
};

namespace detail {

template <typename ModelT, typename Fn>
void walk_arrays_impl(ModelT& model, Fn&& fn) {
  auto mut = [](auto& m) -> std::span<double> {
    if constexpr (std::is_const_v<std::remove_reference_t<decltype(m)>>) {
      return {};
    } else {
      return m.data();
    }
  };
  auto emit_matrix = [&](std::string name, auto& m, ArrayView proto) {
    proto.name = std::move(name);
    proto.count = m.size();
    proto.data = mut(m);
    fn(proto);
  };

  if (model.embed) emit_matrix("embed", *model.embed, ArrayView{.trainable = true});

  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b);
    auto& block = model.blocks[b];
    if (auto* f = std::get_if<FFN>(&block)) {
      emit_matrix(prefix + ".ffn.w_in", f->w_in,
                  ArrayView{.slot = MatrixSlot::w_in, .block = b, .trainable = true});
      emit_matrix(prefix + ".ffn.w_out", f->w_out,
                  ArrayView{.slot = MatrixSlot::w_out, .block = b, .trainable = true});
      continue;
    }
    auto& layer = std::get<MoELayer>(block);
    const bool compressed = layer.origin == LayerOrigin::compressed;
    emit_matrix(prefix + ".moe.router", layer.router.w_r,
                ArrayView{.block = b, .router = true, .trainable = !compressed});

    auto emit_group = [&](auto& group, MatrixSlot slot, const char* gname) {
      const std::string gp = prefix + ".moe." + gname;
      const bool base_is_record = layer.origin == LayerOrigin::vanilla;
      emit_matrix(gp + ".base", group.base,
                  ArrayView{.role = base_is_record ? ArrayRole::init_record : ArrayRole::param,
                            .slot = slot,
                            .block = b,
                            .in_group = true,
                            .trainable = layer.shared_trainable && !compressed});
      for (std::size_t e = 0; e < group.deltas.size(); ++e) {
        const std::string dp = gp + ".delta" + std::to_string(e);
        const ArrayView proto{.slot = slot,
                              .block = b,
                              .in_group = true,
                              .universal = layer.extended && e == layer.n_experts,
                              .trainable = !compressed};
        auto& delta = group.deltas[e];
        if (auto* dd = std::get_if<DenseDelta>(&delta)) {
          emit_matrix(dp + ".dense", dd->mat, proto);
        } else if (auto* sd = std::get_if<SparseDelta>(&delta)) {
          ArrayView v = proto;
          v.name = dp + ".values";
          v.count = sd->value.size();
          if constexpr (!std::is_const_v<ModelT>) v.data = sd->value;
          fn(v);
          ArrayView idx = proto;
          idx.name = dp + ".index";
          idx.role = ArrayRole::index;
          idx.count = sd->index.size();
          idx.bits = 32;
          idx.trainable = false;
          fn(idx);
          if (sd->keep_fraction != 1.0) {
            ArrayView sc = proto;
            sc.name = dp + ".rescale";
            sc.role = ArrayRole::scale;
            sc.count = 1;
            sc.trainable = false;
            fn(sc);
          }
        } else if (auto* ld = std::get_if<LowRankDelta>(&delta)) {
          emit_matrix(dp + ".a", ld->a, proto);
          emit_matrix(dp + ".b", ld->b, proto);
        } else if (auto* qd = std::get_if<QuantizedDelta>(&delta)) {
          ArrayView c = proto;
          c.name = dp + ".codes";
          c.count = qd->rows * qd->cols;
          c.bits = qd->bit_width;
          c.trainable = false;
          fn(c);
          ArrayView sc = proto;
          sc.name = dp + ".scale";
          sc.role = ArrayRole::scale;
          sc.count = 1;
          sc.trainable = false;
          fn(sc);
        }
      }
    };
    emit_group(layer.w_in, MatrixSlot::w_in, "w_in");
    emit_group(layer.w_out, MatrixSlot::w_out, "w_out");

    if (layer.universal) {
      emit_matrix(prefix + ".moe.universal.w_in", layer.universal->w_in,
                  ArrayView{.slot = MatrixSlot::w_in, .block = b, .universal = true,
                            .trainable = !compressed});
      emit_matrix(prefix + ".moe.universal.w_out", layer.universal->w_out,
                  ArrayView{.slot = MatrixSlot::w_out, .block = b, .universal = true,
                            .trainable = !compressed});
    }
  }

  emit_matrix("readout", model.readout, ArrayView{.trainable = true});
  emit_matrix("readout_bias", model.readout_bias, ArrayView{.trainable = true});
}

}  // namespace detail

/// Visits every stored array (read-only; `data` spans are empty).
inline void for_each_array(const Model& model, const std::function<void(const ArrayView&)>& fn) {
  detail::walk_arrays_impl(model, fn);
}

/// Visits every stored array with mutable float data where applicable.
inline void for_each_array_mut(Model& model, const std::function<void(const ArrayView&)>& fn) {
  detail::walk_arrays_impl(model, fn);
}

/// Trainable parameters only, with mutable data.
inline void for_each_trainable(Model& model,
                               const std::function<void(const std::string&, std::span<double>)>& fn) {
  for_each_array_mut(model, [&](const ArrayView& a) {
    if (a.trainable) fn(a.name, a.data);
  });
}

}  // namespace ders
