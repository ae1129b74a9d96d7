// SPDX-License-Identifier: Apache-2.0
#pragma once

// Router, FFN, MoE layer and model forward pass.
//
//   R(x) = TopK(softmax(x W_R), k)          (mask after softmax, no renorm)
//   y    = sum_i R(x)_i * FFN_i(x)  [+ universal FFN(x)]
//
// FFN_i uses W_in/W_out synthesised from each ExpertGroup on demand; experts
// with zero routing score are never synthesised.

#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "ders/deltas.hpp"
#include "ders/numkern.hpp"

namespace ders {

enum class Activation : std::uint8_t { gelu = 0, relu = 1, identity = 2 };

inline const char* activation_name(Activation a) noexcept {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline double activate(Activation a, double x) noexcept {
  switch (a) {
    case Activation::gelu: return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476));
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::identity: return x;
  }
  return x;
}

inline double activate_grad(Activation a, double x) noexcept {
  switch (a) {
    case Activation::gelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
      const double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
      return cdf + x * pdf;
    }
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

inline Matrix apply_activation(Activation a, const Matrix& pre) {
  Matrix out = pre;
  for (double& v : out.data()) v = activate(a, v);
  return out;
}

/// Two-matrix FFN without biases: act(x W_in) W_out.
struct FFN {
  Matrix w_in;   // d x d_h
  Matrix w_out;  // d_h x d
  Activation activation = Activation::gelu;
  bool operator==(const FFN&) const = default;
};

inline Matrix ffn_forward(const Matrix& w_in, const Matrix& w_out, Activation act, const Matrix& x) {
  return matmul(apply_activation(act, matmul(x, w_in)), w_out);
}

inline Matrix ffn_forward(const FFN& f, const Matrix& x) {
  return ffn_forward(f.w_in, f.w_out, f.activation, x);
}

struct Router {
  Matrix w_r;  // d x N
  std::size_t topk_count = 1;
  bool operator==(const Router&) const = default;
};

inline RowVector route(const Router& router, std::span<const double> x) {
  if (x.size() != router.w_r.rows()) {
    throw DimensionError("route: input length " + std::to_string(x.size()) + " vs router " +
                         router.w_r.shape());
  }
  const Matrix logits = matmul(Matrix::row_vector(x), router.w_r);
  return topk_mask(softmax(logits.data()), router.topk_count);
}

/// How a MoE layer came to be. Vanilla and compressed layers keep the
/// upcycle-time FFN weight as their group base; DeRS-upcycled layers hold a
/// trainable shared weight there instead.
enum class LayerOrigin : std::uint8_t { vanilla = 0, ders_sm = 1, ders_lm = 2, compressed = 3 };

inline const char* origin_name(LayerOrigin o) noexcept {
  switch (o) {
    case LayerOrigin::vanilla: return "vanilla";
    case LayerOrigin::ders_sm: return "ders-sm";
    case LayerOrigin::ders_lm: return "ders-lm";
    case LayerOrigin::compressed: return "compressed";
  }
  return "?";
}

struct MoELayer {
  Router router;
  ExpertGroup w_in;   // base d x d_h
  ExpertGroup w_out;  // base d_h x d
  std::size_t n_experts = 0;
  Activation activation = Activation::gelu;
  // Parallel always-active FFN, kept as a separate full FFN.
  std::optional<FFN> universal;
  // When set, the universal FFN is folded into the groups as member N
  // (deltas[n_experts]) and is always active with weight 1.
  bool extended = false;
  LayerOrigin origin = LayerOrigin::vanilla;
  bool shared_trainable = false;

  std::size_t member_count() const noexcept { return n_experts + (extended ? 1 : 0); }
  bool holds_init_base() const noexcept {
    return origin == LayerOrigin::vanilla || origin == LayerOrigin::compressed;
  }
  bool operator==(const MoELayer&) const = default;
};

inline void validate_layer(const MoELayer& layer) {
  const std::size_t members = layer.member_count();
  if (layer.router.w_r.cols() != layer.n_experts)
    throw DimensionError("moe layer: router " + layer.router.w_r.shape() + " for " +
                         std::to_string(layer.n_experts) + " experts");
  if (layer.router.topk_count < 1 || layer.router.topk_count > layer.n_experts)
    throw ParameterError("moe layer: top-k count outside [1, N]");
  if (layer.w_in.deltas.size() != members || layer.w_out.deltas.size() != members)
    throw CorruptionError("moe layer: expected " + std::to_string(members) + " deltas per group");
  if (layer.w_in.base.cols() != layer.w_out.base.rows() ||
      layer.w_in.base.rows() != layer.w_out.base.cols())
    throw DimensionError("moe layer: base shapes " + layer.w_in.base.shape() + " / " +
                         layer.w_out.base.shape());
  if (layer.router.w_r.rows() != layer.w_in.base.rows())
    throw DimensionError("moe layer: router rows do not match model width");
  if (layer.extended && layer.universal)
    throw CorruptionError("moe layer: extended layer must not also carry a separate universal FFN");
}

struct ForwardStats {
  // Number of expert syntheses (one per member for both matrices).
  std::size_t synth_calls = 0;
};

/// Intermediates of one FFN member over the rows it processed.
struct MemberTape {
  std::size_t member = 0;  // expert index, n_experts for the folded universal member
  bool is_universal = false;
  std::vector<std::size_t> rows;
  std::vector<double> gate;  // routing score per row (1 for always-on members)
  Matrix x;                  // gathered inputs
  Matrix pre;                // x W_in
  Matrix act;                // activation(pre)
  Matrix out;                // act W_out (before gating)
  Matrix w_in;               // synthesised weights used
  Matrix w_out;
};

struct MoETape {
  Matrix probs;  // B x N softmax
  std::vector<std::vector<std::size_t>> selected;  // per row top-k set
  std::vector<MemberTape> members;
};

namespace detail {

inline MemberTape run_member(std::size_t member, bool is_universal,
                             std::vector<std::size_t> rows, std::vector<double> gate,
                             const Matrix& x_full, Matrix w_in, Matrix w_out, Activation act) {
  MemberTape t;
  t.member = member;
  t.is_universal = is_universal;
  t.rows = std::move(rows);
  t.gate = std::move(gate);
  t.x = Matrix(t.rows.size(), x_full.cols());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    auto src = x_full.row(t.rows[r]);
    std::copy(src.begin(), src.end(), t.x.row(r).begin());
  }
  t.pre = matmul(t.x, w_in);
  t.act = apply_activation(act, t.pre);
  t.out = matmul(t.act, w_out);
  t.w_in = std::move(w_in);
  t.w_out = std::move(w_out);
  return t;
}

}  // namespace detail

/// Batched MoE forward. Each expert is synthesised at most once per call and
/// only if some row routes to it with a positive score.
inline Matrix moe_forward_batch(const MoELayer& layer, const Matrix& x, ForwardStats* stats = nullptr,
                                MoETape* tape = nullptr) {
  validate_layer(layer);
  if (x.cols() != layer.router.w_r.rows()) {
    throw DimensionError("moe_forward: input " + x.shape() + " vs router " + layer.router.w_r.shape());
  }
  const std::size_t batch = x.rows();
  const std::size_t n = layer.n_experts;
  const Matrix logits = matmul(x, layer.router.w_r);

  MoETape local;
  MoETape& tp = tape ? *tape : local;
  tp.probs = Matrix(batch, n);
  tp.selected.assign(batch, {});
  tp.members.clear();

  std::vector<std::vector<std::size_t>> rows_for(n);
  std::vector<std::vector<double>> gate_for(n);
  for (std::size_t t = 0; t < batch; ++t) {
    const RowVector p = softmax(logits.row(t));
    std::copy(p.begin(), p.end(), tp.probs.row(t).begin());
    tp.selected[t] = topk_indices(p, layer.router.topk_count);
    for (std::size_t i : tp.selected[t]) {
      if (p[i] > 0.0) {
        rows_for[i].push_back(t);
        gate_for[i].push_back(p[i]);
      }
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (rows_for[i].empty()) continue;
    if (stats) ++stats->synth_calls;
    tp.members.push_back(detail::run_member(i, false, rows_for[i], gate_for[i], x,
                                            synthesize(layer.w_in.base, layer.w_in.deltas[i]),
                                            synthesize(layer.w_out.base, layer.w_out.deltas[i]),
                                            layer.activation));
  }

  std::vector<std::size_t> all_rows(batch);
  for (std::size_t t = 0; t < batch; ++t) all_rows[t] = t;
  if (layer.extended) {
    if (stats) ++stats->synth_calls;
    tp.members.push_back(detail::run_member(n, true, all_rows, std::vector<double>(batch, 1.0), x,
                                            synthesize(layer.w_in.base, layer.w_in.deltas[n]),
                                            synthesize(layer.w_out.base, layer.w_out.deltas[n]),
                                            layer.activation));
  } else if (layer.universal) {
    tp.members.push_back(detail::run_member(n, true, all_rows, std::vector<double>(batch, 1.0), x,
                                            layer.universal->w_in, layer.universal->w_out,
                                            layer.universal->activation));
  }

  Matrix y(batch, x.cols());
  for (const MemberTape& m : tp.members) {
    for (std::size_t r = 0; r < m.rows.size(); ++r) {
      auto dst = y.row(m.rows[r]);
      auto src = m.out.row(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += m.gate[r] * src[j];
    }
  }
  return y;
}

inline RowVector moe_forward(const MoELayer& layer, std::span<const double> x,
                             ForwardStats* stats = nullptr) {
  const Matrix y = moe_forward_batch(layer, Matrix::row_vector(x), stats);
  return RowVector(y.data().begin(), y.data().end());
}

// ---------------------------------------------------------------------------
// Model

using Block = std::variant<FFN, MoELayer>;

struct Model {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  std::size_t d = 0;    // residual width
  std::size_t d_h = 0;  // FFN hidden width
  Activation activation = Activation::gelu;
  std::optional<Matrix> embed;  // input_dim x d; absent means inputs are used directly
  std::vector<Block> blocks;    // residual: h <- h + block(h)
  Matrix readout;               // d x output_dim
  Matrix readout_bias;          // 1 x output_dim
  std::uint64_t ancestor_params = 0;
  std::map<std::string, std::uint64_t> seeds;

  std::size_t moe_layer_count() const {
    std::size_t c = 0;
    for (const auto& b : blocks) c += std::holds_alternative<MoELayer>(b) ? 1 : 0;
    return c;
  }
  bool operator==(const Model&) const = default;
};

/// Forward of one block on a batch (without the residual add).
inline Matrix block_forward(const Block& block, const Matrix& h, ForwardStats* stats = nullptr) {
  if (const auto* f = std::get_if<FFN>(&block)) return ffn_forward(*f, h);
  return moe_forward_batch(std::get<MoELayer>(block), h, stats);
}

inline Matrix add_readout(const Model& m, const Matrix& h) {
  Matrix out = matmul(h, m.readout);
  for (std::size_t t = 0; t < out.rows(); ++t)
    for (std::size_t j = 0; j < out.cols(); ++j) out(t, j) += m.readout_bias(0, j);
  return out;
}

namespace detail {

inline Matrix forward_rows(const Model& model, const Matrix& batch, ForwardStats* stats) {
  Matrix h = model.embed ? matmul(batch, *model.embed) : batch;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const Matrix y = block_forward(model.blocks[b], h, stats);
    add_inplace(h, y);
    if (!h.all_finite()) {
      throw NumericError("non-finite activations after block " + std::to_string(b));
    }
  }
  return add_readout(model, h);
}

}  // namespace detail

/// Row-independent forward. Rows are processed in fixed-size chunks (in
/// parallel when DERS_THREADS > 1); every row result is independent of the
/// chunking.
inline Matrix model_forward(const Model& model, const Matrix& batch, ForwardStats* stats = nullptr) {
  if (batch.cols() != model.input_dim) {
    throw DimensionError("model_forward: batch " + batch.shape() + " for input width " +
                         std::to_string(model.input_dim));
  }
  constexpr std::size_t kChunk = 64;
  if (stats || batch.rows() <= kChunk || thread_cap() <= 1) {
    return detail::forward_rows(model, batch, stats);
  }
  const std::size_t chunks = (batch.rows() + kChunk - 1) / kChunk;
  Matrix out(batch.rows(), model.output_dim);
  std::vector<std::exception_ptr> errors(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    try {
      const std::size_t lo = c * kChunk;
      const std::size_t hi = std::min(batch.rows(), lo + kChunk);
      Matrix part(hi - lo, batch.cols());
      for (std::size_t r = lo; r < hi; ++r) {
        auto src = batch.row(r);
        std::copy(src.begin(), src.end(), part.row(r - lo).begin());
      }
      const Matrix y = detail::forward_rows(model, part, nullptr);
      for (std::size_t r = lo; r < hi; ++r) {
        auto src = y.row(r - lo);
        std::copy(src.begin(), src.end(), out.row(r).begin());
      }
    } catch (...) {
      errors[c] = std::current_exception();
    }
  });
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

/// Dense FFN model used as the upcycling ancestor.
inline Model make_dense_model(std::size_t input_dim, std::size_t output_dim, std::size_t d,
                              std::size_t d_h, std::size_t depth, Activation act, RngStream& rng,
                              bool with_embed = true) {
  Model m;
  m.input_dim = input_dim;
  m.output_dim = output_dim;
  m.d = with_embed ? d : input_dim;
  m.d_h = d_h;
  m.activation = act;
  if (with_embed) {
    const double s = 1.0 / std::sqrt(static_cast<double>(input_dim));
    m.embed = uniform_matrix(input_dim, d, -s, s, rng);
  }
  const double s_in = 1.0 / std::sqrt(static_cast<double>(m.d));
  const double s_out = 1.0 / std::sqrt(static_cast<double>(d_h));
  for (std::size_t l = 0; l < depth; ++l) {
    FFN f;
    f.w_in = uniform_matrix(m.d, d_h, -s_in, s_in, rng);
    f.w_out = uniform_matrix(d_h, m.d, -s_out, s_out, rng);
    f.activation = act;
    m.blocks.emplace_back(std::move(f));
  }
  m.readout = uniform_matrix(m.d, output_dim, -s_in, s_in, rng);
  m.readout_bias = Matrix(1, output_dim);
  m.ancestor_params = (m.embed ? m.embed->size() : 0) + depth * 2 * m.d * d_h + m.readout.size() +
                      m.readout_bias.size();
  return m;
}

}  // namespace ders
