// SPDX-License-Identifier: Apache-2.0
#pragma once

// Redundancy diagnostics over upcycled models: pairwise cosine similarity of
// {init FFN, E_1..E_N} weights and per-expert delta magnitudes. FFN matrices
// only; routers are not included.

#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "ders/deltas.hpp"
#include "ders/moe.hpp"

namespace ders {

/// nullopt when either vector has zero norm. Exactly symmetric, and exactly
/// 1 for identical nonzero inputs (sqrt(x*x) == x in IEEE arithmetic).
inline std::optional<double> cosine_similarity(std::span<const double> u, std::span<const double> v) {
  const double uv = dot(u, v);
  const double uu = dot(u, u);
  const double vv = dot(v, v);
  if (uu == 0.0 || vv == 0.0) return std::nullopt;
  const double c = uv / std::sqrt(uu * vv);
  return std::clamp(c, -1.0, 1.0);
}

using SimilarityMatrix = std::vector<std::vector<std::optional<double>>>;

struct LayerSimilarity {
  std::size_t block = 0;
  // Row/column 0 is the reference weight ("ffn_init" for layers that keep
  // the upcycle-time weight, "w_shared" otherwise); rows 1..N are experts.
  std::string reference;
  SimilarityMatrix w_in;
  SimilarityMatrix w_out;
  SimilarityMatrix mean;  // average of w_in and w_out where both are defined
};

struct SimilarityReport {
  std::vector<LayerSimilarity> layers;
  std::string note = "weights compared: FFN w_in/w_out only (router excluded)";
};

namespace detail {

inline SimilarityMatrix pairwise(const std::vector<Matrix>& items) {
  const std::size_t n = items.size();
  SimilarityMatrix s(n, std::vector<std::optional<double>>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      s[i][j] = cosine_similarity(items[i].data(), items[j].data());
      s[j][i] = s[i][j];
    }
  return s;
}

inline std::vector<Matrix> group_items(const ExpertGroup& g, std::size_t n_experts) {
  std::vector<Matrix> items;
  items.push_back(g.base);
  for (std::size_t e = 0; e < n_experts; ++e) items.push_back(synthesize(g.base, g.deltas[e]));
  return items;
}

}  // namespace detail

inline SimilarityReport cosine_report(const Model& model) {
  SimilarityReport rep;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto* layer = std::get_if<MoELayer>(&model.blocks[b]);
    if (!layer) continue;
    LayerSimilarity ls;
    ls.block = b;
    ls.reference = layer->holds_init_base() ? "ffn_init" : "w_shared";
    ls.w_in = detail::pairwise(detail::group_items(layer->w_in, layer->n_experts));
    ls.w_out = detail::pairwise(detail::group_items(layer->w_out, layer->n_experts));
    const std::size_t n = ls.w_in.size();
    ls.mean.assign(n, std::vector<std::optional<double>>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (ls.w_in[i][j] && ls.w_out[i][j]) ls.mean[i][j] = 0.5 * (*ls.w_in[i][j] + *ls.w_out[i][j]);
    rep.layers.push_back(std::move(ls));
  }
  if (rep.layers.empty()) throw StateError("cosine_report: model has no MoE layers");
  return rep;
}

/// Smallest defined off-diagonal entry of a layer's similarity matrix.
inline std::optional<double> min_offdiag(const SimilarityMatrix& s) {
  std::optional<double> m;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (i != j && s[i][j]) m = m ? std::min(*m, *s[i][j]) : *s[i][j];
  return m;
}

/// Heatmap-ready rows: block,matrix,row,col,value ("undefined" for zero norms).
inline std::string to_csv(const SimilarityReport& r) {
  std::string out = "# " + r.note + "\nblock,reference,matrix,row,col,value\n";
  auto emit = [&](const LayerSimilarity& l, const char* which, const SimilarityMatrix& s) {
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t j = 0; j < s.size(); ++j) {
        const std::string buf = s[i][j] ? format_double(*s[i][j]) : "undefined";
        out += std::to_string(l.block) + "," + l.reference + "," + which + "," +
               std::to_string(i) + "," + std::to_string(j) + "," + buf + "\n";
      }
  };
  for (const auto& l : r.layers) {
    emit(l, "w_in", l.w_in);
    emit(l, "w_out", l.w_out);
    emit(l, "mean", l.mean);
  }
  return out;
}

struct DeltaNormRow {
  std::size_t block = 0;
  std::size_t expert = 0;
  double delta_norm_w_in = 0.0;
  double delta_norm_w_out = 0.0;
  std::optional<double> ratio_w_in;   // ||delta|| / ||base||, nullopt if base is zero
  std::optional<double> ratio_w_out;
};

/// Frobenius norms of the expert deltas (recomputed through decompose) and
/// their ratio to the base norm.
inline std::vector<DeltaNormRow> delta_stats(const Model& model) {
  std::vector<DeltaNormRow> rows;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto* layer = std::get_if<MoELayer>(&model.blocks[b]);
    if (!layer) continue;
    const double base_in = frobenius_norm(layer->w_in.base);
    const double base_out = frobenius_norm(layer->w_out.base);
    for (std::size_t e = 0; e < layer->n_experts; ++e) {
      DeltaNormRow r;
      r.block = b;
      r.expert = e;
      r.delta_norm_w_in = frobenius_norm(
          decompose(layer->w_in.base, synthesize(layer->w_in.base, layer->w_in.deltas[e])).mat);
      r.delta_norm_w_out = frobenius_norm(
          decompose(layer->w_out.base, synthesize(layer->w_out.base, layer->w_out.deltas[e])).mat);
      if (base_in > 0.0) r.ratio_w_in = r.delta_norm_w_in / base_in;
      if (base_out > 0.0) r.ratio_w_out = r.delta_norm_w_out / base_out;
      rows.push_back(r);
    }
  }
  if (rows.empty()) throw StateError("delta_stats: model has no MoE layers");
  return rows;
}

inline std::string to_csv(const std::vector<DeltaNormRow>& rows) {
  std::string out = "block,expert,delta_norm_w_in,delta_norm_w_out,ratio_w_in,ratio_w_out\n";
  auto num = [](std::optional<double> v) {
    return v ? format_double(*v) : std::string("undefined");
  };
  for (const auto& r : rows) {
    out += std::to_string(r.block) + "," + std::to_string(r.expert) + "," + num(r.delta_norm_w_in) +
           "," + num(r.delta_norm_w_out) + "," + num(r.ratio_w_in) + "," + num(r.ratio_w_out) + "\n";
  }
  return out;
}

}  // namespace ders
