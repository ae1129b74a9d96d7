// SPDX-License-Identifier: Apache-2.0
#pragma once

// Parameter / storage accounting by exhaustive walk over stored arrays, plus
// the closed-form counts it is checked against:
//
//   sparse deltas (compression or DeRS-SM):  (1 + N(1-p)) * d * d_h
//   low-rank deltas (DeRS-LM):               d * d_h + N * r * (d + d_h)
//   quantised deltas (bits):                 (K + N * k) * d * d_h
//
// all per matrix; a MoE layer has two matrices (w_in, w_out).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ders/compress.hpp"
#include "ders/params.hpp"
#include "ders/upcycle.hpp"

namespace ders {

inline constexpr int kParamReportSchemaVersion = 1;

struct CountTotals {
  std::uint64_t trainable_values = 0;
  std::uint64_t param_values = 0;        // floats or codes parameterising the forward pass
  std::uint64_t index_values = 0;        // u32 sparse positions
  std::uint64_t scale_values = 0;        // quantisation scales, sparse rescales
  std::uint64_t init_record_values = 0;  // upcycle-time FFN copies kept for decomposition
  std::uint64_t stored_values = 0;       // param + init_record
  std::uint64_t stored_bits = 0;         // param arrays: K per float, k per code
  std::uint64_t overhead_bits = 0;       // indices (32) and scalars (K)
  std::uint64_t init_record_bits = 0;

  CountTotals& operator+=(const CountTotals& o) {
    trainable_values += o.trainable_values;
    param_values += o.param_values;
    index_values += o.index_values;
    scale_values += o.scale_values;
    init_record_values += o.init_record_values;
    stored_values += o.stored_values;
    stored_bits += o.stored_bits;
    overhead_bits += o.overhead_bits;
    init_record_bits += o.init_record_bits;
    return *this;
  }
  bool operator==(const CountTotals&) const = default;
};

struct MatrixCounts {
  CountTotals w_in;
  CountTotals w_out;
  bool operator==(const MatrixCounts&) const = default;
};

struct LayerReport {
  std::string name;  // "embed", "block3", "readout"
  std::string kind;  // "embed", "ffn", "moe:<origin>", "readout"
  CountTotals totals;
  // MoE layers only: expert-group counts per matrix (router/universal excluded).
  std::optional<MatrixCounts> group;
  std::uint64_t router_values = 0;
  std::uint64_t universal_values = 0;
  std::size_t n_experts = 0;
  std::size_t members = 0;
  // Expert-group parameter bits / (members * K * dense size); 1 for vanilla.
  std::optional<double> equivalent_expert_ratio;
  bool operator==(const LayerReport&) const = default;
};

struct ParamReport {
  unsigned original_bits = 64;
  std::vector<LayerReport> layers;
  CountTotals totals;
  std::uint64_t ancestor_params = 0;
  std::int64_t added_params_values_only = 0;
  std::int64_t added_params_with_indices = 0;  // values + indices + scales
  bool operator==(const ParamReport&) const = default;
};

inline ParamReport count_report(const Model& model,
                                unsigned original_bits = dtype_bits(default_dtype())) {
  ParamReport rep;
  rep.original_bits = original_bits;
  std::map<std::size_t, std::size_t> slot_of_block;
  auto layer_for = [&](const ArrayView& a) -> LayerReport& {
    if (a.block == SIZE_MAX) {
      const std::string name = a.name == "embed" ? "embed" : "readout";
      for (auto& l : rep.layers)
        if (l.name == name) return l;
      LayerReport l;
      l.name = name;
      l.kind = name;
      rep.layers.push_back(l);
      return rep.layers.back();
    }
    auto it = slot_of_block.find(a.block);
    if (it != slot_of_block.end()) return rep.layers[it->second];
    LayerReport l;
    l.name = "block" + std::to_string(a.block);
    if (const auto* moe = std::get_if<MoELayer>(&model.blocks[a.block])) {
      l.kind = std::string("moe:") + origin_name(moe->origin);
      l.group = MatrixCounts{};
      l.n_experts = moe->n_experts;
      l.members = moe->member_count();
    } else {
      l.kind = "ffn";
    }
    slot_of_block[a.block] = rep.layers.size();
    rep.layers.push_back(l);
    return rep.layers.back();
  };

  for_each_array(model, [&](const ArrayView& a) {
    CountTotals c;
    const unsigned bits = a.bits == 0 ? original_bits : a.bits;
    const std::uint64_t total_bits = static_cast<std::uint64_t>(a.count) * bits;
    if (a.trainable) c.trainable_values = a.count;
    switch (a.role) {
      case ArrayRole::param:
        c.param_values = a.count;
        c.stored_values = a.count;
        c.stored_bits = total_bits;
        break;
      case ArrayRole::index:
        c.index_values = a.count;
        c.overhead_bits = total_bits;
        break;
      case ArrayRole::scale:
        c.scale_values = a.count;
        c.overhead_bits = total_bits;
        break;
      case ArrayRole::init_record:
        c.init_record_values = a.count;
        c.stored_values = a.count;
        c.init_record_bits = total_bits;
        break;
    }
    LayerReport& l = layer_for(a);
    l.totals += c;
    if (a.router) l.router_values += a.count;
    if (a.universal && !a.in_group) l.universal_values += a.count;
    if (l.group && a.in_group) {
      (a.slot == MatrixSlot::w_in ? l.group->w_in : l.group->w_out) += c;
    }
  });

  for (auto& l : rep.layers) {
    rep.totals += l.totals;
    if (l.group) {
      const auto& layer = std::get<MoELayer>(model.blocks[std::stoul(l.name.substr(5))]);
      if (layer.origin == LayerOrigin::vanilla) {
        l.equivalent_expert_ratio = 1.0;
      } else {
        const double dense = static_cast<double>(layer.w_in.base.size() + layer.w_out.base.size());
        l.equivalent_expert_ratio =
            static_cast<double>(l.group->w_in.stored_bits + l.group->w_out.stored_bits) /
            (static_cast<double>(l.members) * original_bits * dense);
      }
    }
  }
  rep.ancestor_params = model.ancestor_params;
  rep.added_params_values_only = static_cast<std::int64_t>(rep.totals.param_values) -
                                 static_cast<std::int64_t>(model.ancestor_params);
  rep.added_params_with_indices =
      static_cast<std::int64_t>(rep.totals.param_values + rep.totals.index_values +
                                rep.totals.scale_values) -
      static_cast<std::int64_t>(model.ancestor_params);
  return rep;
}

// ---------------------------------------------------------------------------
// JSON / CSV emitters

inline nlohmann::ordered_json totals_json(const CountTotals& c) {
  return {{"trainable_values", c.trainable_values}, {"param_values", c.param_values},
          {"index_values", c.index_values},         {"scale_values", c.scale_values},
          {"init_record_values", c.init_record_values}, {"stored_values", c.stored_values},
          {"stored_bits", c.stored_bits},           {"overhead_bits", c.overhead_bits},
          {"init_record_bits", c.init_record_bits}};
}

inline nlohmann::ordered_json to_json(const ParamReport& r) {
  nlohmann::ordered_json j;
  j["schema"] = "ders.param_report";
  j["schema_version"] = kParamReportSchemaVersion;
  j["original_bits"] = r.original_bits;
  j["ancestor_params"] = r.ancestor_params;
  j["added_params_values_only"] = r.added_params_values_only;
  j["added_params_with_indices"] = r.added_params_with_indices;
  j["totals"] = totals_json(r.totals);
  auto layers = nlohmann::ordered_json::array();
  for (const auto& l : r.layers) {
    nlohmann::ordered_json lj;
    lj["name"] = l.name;
    lj["kind"] = l.kind;
    lj["totals"] = totals_json(l.totals);
    if (l.group) {
      lj["n_experts"] = l.n_experts;
      lj["members"] = l.members;
      lj["router_values"] = l.router_values;
      lj["universal_values"] = l.universal_values;
      lj["group_w_in"] = totals_json(l.group->w_in);
      lj["group_w_out"] = totals_json(l.group->w_out);
      lj["equivalent_expert_ratio"] = *l.equivalent_expert_ratio;
    }
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  return j;
}

inline std::string to_csv(const ParamReport& r) {
  std::string out =
      "# schema=ders.param_report version=" + std::to_string(kParamReportSchemaVersion) +
      " original_bits=" + std::to_string(r.original_bits) + "\n" +
      "layer,kind,trainable_values,param_values,index_values,scale_values,init_record_values,"
      "stored_values,stored_bits,overhead_bits,equivalent_expert_ratio\n";
  auto row = [&](const std::string& name, const std::string& kind, const CountTotals& c,
                 const std::optional<double>& ratio) {
    const std::string ratio_buf = ratio ? format_double(*ratio) : std::string();
    out += name + "," + kind + "," + std::to_string(c.trainable_values) + "," +
           std::to_string(c.param_values) + "," + std::to_string(c.index_values) + "," +
           std::to_string(c.scale_values) + "," + std::to_string(c.init_record_values) + "," +
           std::to_string(c.stored_values) + "," + std::to_string(c.stored_bits) + "," +
           std::to_string(c.overhead_bits) + "," + ratio_buf + "\n";
  };
  for (const auto& l : r.layers) row(l.name, l.kind, l.totals, l.equivalent_expert_ratio);
  row("total", "total", r.totals, std::nullopt);
  out += "# added_params_values_only=" + std::to_string(r.added_params_values_only) +
         " added_params_with_indices=" + std::to_string(r.added_params_with_indices) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Closed-form checks

enum class FormulaKind : std::uint8_t {
  sm_upcycle,         // trainable values per matrix
  lm_upcycle,         // trainable values per matrix
  sparsify_compress,  // stored parameter values per matrix
  quantize_compress,  // stored parameter bits per matrix
};

inline const char* formula_kind_name(FormulaKind k) noexcept {
  switch (k) {
    case FormulaKind::sm_upcycle: return "ders-sm trainable";
    case FormulaKind::lm_upcycle: return "ders-lm trainable";
    case FormulaKind::sparsify_compress: return "sparsify stored values";
    case FormulaKind::quantize_compress: return "quantize stored bits";
  }
  return "?";
}

struct FormulaCase {
  FormulaKind kind = FormulaKind::sm_upcycle;
  std::size_t d = 8;
  std::size_t d_h = 16;
  std::size_t n_experts = 4;
  double p = 0.75;          // sparse / drop rate
  std::size_t rank = 2;     // low-rank
  unsigned bit_width = 2;   // k
  unsigned original_bits = 16;  // K
};

struct FormulaRow {
  FormulaCase config;
  double formula = 0.0;  // per matrix
  double walked_w_in = 0.0;
  double walked_w_out = 0.0;
  double max_deviation = 0.0;
  double tolerance = 0.0;  // N values for value counts, 0 for bits
  bool pass = false;
};

inline double formula_value(const FormulaCase& c) {
  const double dd = static_cast<double>(c.d) * static_cast<double>(c.d_h);
  const double n = static_cast<double>(c.n_experts);
  switch (c.kind) {
    case FormulaKind::sm_upcycle:
    case FormulaKind::sparsify_compress:
      return (1.0 + n * (1.0 - c.p)) * dd;
    case FormulaKind::lm_upcycle:
      return dd + n * static_cast<double>(c.rank) * static_cast<double>(c.d + c.d_h);
    case FormulaKind::quantize_compress:
      return (static_cast<double>(c.original_bits) + n * c.bit_width) * dd;
  }
  return 0.0;
}

/// Builds a one-layer model for the case, walks its arrays and compares the
/// per-matrix count with the closed form. Compression cases use exact-count
/// masks so the realised kept count is round(d*d_h*(1-p)) per delta.
inline FormulaRow check_formula(const FormulaCase& c, std::uint64_t seed) {
  RngStream rng(seed, stream_id({0xF0, c.d, c.d_h, c.n_experts}));
  Model dense = make_dense_model(c.d, c.d, c.d, c.d_h, 1, Activation::gelu, rng, false);
  UpcycleConfig ucfg;
  ucfg.n_experts = c.n_experts;
  ucfg.topk_count = 1;
  ucfg.seed = seed;
  ucfg.sparse_rate = c.p;
  ucfg.rank = c.rank;
  ucfg.method = c.kind == FormulaKind::sm_upcycle   ? UpcycleMethod::ders_sm
                : c.kind == FormulaKind::lm_upcycle ? UpcycleMethod::ders_lm
                                                    : UpcycleMethod::vanilla;
  Model model = upcycle(dense, ucfg);

  if (c.kind == FormulaKind::sparsify_compress || c.kind == FormulaKind::quantize_compress) {
    // Stand-in for fine-tuning: move every expert away from the base.
    for_each_trainable(model, [&](const std::string& name, std::span<double> data) {
      if (name.find(".delta") == std::string::npos) return;
      for (double& v : data) v = rng.uniform(-0.01, 0.01);
    });
    CompressionSpec spec;
    spec.seed = seed;
    spec.mask = MaskMode::exact_count;
    spec.technique = c.kind == FormulaKind::sparsify_compress ? CompressTechnique::sparsify
                                                              : CompressTechnique::quantize;
    spec.drop_rate = c.p;
    spec.bit_width = c.bit_width;
    model = ders_compress(model, spec, nullptr, c.original_bits);
  }

  const ParamReport rep = count_report(model, c.original_bits);
  const LayerReport& layer = rep.layers[0];
  FormulaRow row;
  row.config = c;
  row.formula = formula_value(c);
  auto pick = [&](const CountTotals& t) -> double {
    switch (c.kind) {
      case FormulaKind::sm_upcycle:
      case FormulaKind::lm_upcycle: return static_cast<double>(t.trainable_values);
      case FormulaKind::sparsify_compress: return static_cast<double>(t.param_values);
      case FormulaKind::quantize_compress: return static_cast<double>(t.stored_bits);
    }
    return 0.0;
  };
  row.walked_w_in = pick(layer.group->w_in);
  row.walked_w_out = pick(layer.group->w_out);
  row.max_deviation = std::max(std::abs(row.walked_w_in - row.formula),
                               std::abs(row.walked_w_out - row.formula));
  row.tolerance = c.kind == FormulaKind::quantize_compress ? 0.0 : static_cast<double>(c.n_experts);
  row.pass = row.max_deviation <= row.tolerance;
  return row;
}

inline std::vector<FormulaRow> formula_check(const std::vector<FormulaCase>& cases,
                                             std::uint64_t seed) {
  std::vector<FormulaRow> rows;
  rows.reserve(cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) rows.push_back(check_formula(cases[i], seed + i));
  return rows;
}

}  // namespace ders
