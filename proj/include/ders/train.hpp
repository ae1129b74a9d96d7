// SPDX-License-Identifier: Apache-2.0
#pragma once

// Exact reverse-mode gradients and the training loop.
//
// Gradients of a synthesised expert weight dW flow to its parameterisation:
//   shared base  += dW                      (summed over members)
//   dense delta   = dW
//   sparse values = dW[index] / keep_fraction
//   low-rank      : dA = dW B^T, dB = A^T dW
// The top-k mask is treated as constant; routing gradients flow through the
// surviving softmax entries only.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ders/moe.hpp"
#include "ders/params.hpp"
#include "ders/task.hpp"

namespace ders {

using GradientSet = std::map<std::string, Matrix>;

struct Batch {
  Matrix x;
  Matrix y;                         // regression targets
  std::vector<std::size_t> labels;  // classification labels
};

inline Batch gather_batch(const Dataset& ds, std::span<const std::size_t> rows) {
  Batch b;
  b.x = Matrix(rows.size(), ds.x.cols());
  if (!ds.y.empty()) b.y = Matrix(rows.size(), ds.y.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto xs = ds.x.row(rows[r]);
    std::copy(xs.begin(), xs.end(), b.x.row(r).begin());
    if (!ds.y.empty()) {
      auto ys = ds.y.row(rows[r]);
      std::copy(ys.begin(), ys.end(), b.y.row(r).begin());
    }
    if (!ds.labels.empty()) b.labels.push_back(ds.labels[rows[r]]);
  }
  return b;
}

inline Batch full_batch(const Dataset& ds) {
  std::vector<std::size_t> rows(ds.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return gather_batch(ds, rows);
}

struct LossValue {
  double total = 0.0;
  double task = 0.0;
  double aux = 0.0;  // unscaled load-balance penalty summed over MoE layers
};

// ---------------------------------------------------------------------------
// Loss heads

namespace detail {

inline double task_loss_and_grad(const Matrix& out, const Batch& batch, bool classification,
                                 Matrix* d_out) {
  const double inv_b = 1.0 / static_cast<double>(out.rows());
  double loss = 0.0;
  if (d_out) *d_out = Matrix(out.rows(), out.cols());
  if (!classification) {
    require_same_shape(out, batch.y, "regression loss");
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double e = out[i] - batch.y[i];
      loss += e * e;
      if (d_out) (*d_out)[i] = 2.0 * e * inv_b;
    }
    return loss * inv_b;
  }
  if (batch.labels.size() != out.rows()) throw DimensionError("classification loss: label count");
  for (std::size_t t = 0; t < out.rows(); ++t) {
    const RowVector p = softmax(out.row(t));
    const std::size_t y = batch.labels[t];
    loss -= std::log(std::max(p[y], 1e-300));
    if (d_out) {
      for (std::size_t j = 0; j < p.size(); ++j) (*d_out)(t, j) = (p[j] - (j == y ? 1.0 : 0.0)) * inv_b;
    }
  }
  return loss * inv_b;
}

/// N * sum_i f_i * P_i with f_i the fraction of top-k slots routed to expert
/// i (constant) and P_i the mean router probability.
inline double load_balance(const MoETape& tape, std::size_t n, std::size_t k, Matrix* d_probs,
                           double coeff) {
  const std::size_t batch = tape.probs.rows();
  std::vector<double> frac(n, 0.0), mean_p(n, 0.0);
  for (std::size_t t = 0; t < batch; ++t) {
    for (std::size_t i : tape.selected[t]) frac[i] += 1.0;
    for (std::size_t i = 0; i < n; ++i) mean_p[i] += tape.probs(t, i);
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  double aux = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    frac[i] *= inv_b / static_cast<double>(k);
    mean_p[i] *= inv_b;
    aux += frac[i] * mean_p[i];
  }
  aux *= static_cast<double>(n);
  if (d_probs && coeff != 0.0) {
    for (std::size_t t = 0; t < batch; ++t)
      for (std::size_t i = 0; i < n; ++i)
        (*d_probs)(t, i) += coeff * static_cast<double>(n) * frac[i] * inv_b;
  }
  return aux;
}

struct BlockTape {
  Matrix input;               // h_l
  Matrix pre, act;            // plain FFN intermediates
  std::optional<MoETape> moe;
};

inline void accumulate(GradientSet& g, const std::string& name, const Matrix& m,
                       const std::set<std::string>& trainable) {
  if (!trainable.count(name)) return;
  auto it = g.find(name);
  if (it == g.end()) g.emplace(name, m);
  else add_inplace(it->second, m);
}

/// Routes dW of a synthesised member weight to its parameterisation.
inline void route_member_grad(GradientSet& g, const std::string& group_prefix, const ExpertGroup& group,
                              std::size_t member, const Matrix& dw,
                              const std::set<std::string>& trainable) {
  accumulate(g, group_prefix + ".base", dw, trainable);
  const std::string dp = group_prefix + ".delta" + std::to_string(member);
  const DeltaWeight& delta = group.deltas[member];
  if (std::holds_alternative<DenseDelta>(delta)) {
    accumulate(g, dp + ".dense", dw, trainable);
  } else if (const auto* s = std::get_if<SparseDelta>(&delta)) {
    if (!trainable.count(dp + ".values")) return;
    Matrix gv(1, s->index.size());
    for (std::size_t j = 0; j < s->index.size(); ++j) gv[j] = dw[s->index[j]] / s->keep_fraction;
    accumulate(g, dp + ".values", gv, trainable);
  } else if (const auto* l = std::get_if<LowRankDelta>(&delta)) {
    if (trainable.count(dp + ".a")) accumulate(g, dp + ".a", matmul_nt(dw, l->b), trainable);
    if (trainable.count(dp + ".b")) accumulate(g, dp + ".b", matmul_tn(l->a, dw), trainable);
  }
}

}  // namespace detail

inline std::set<std::string> trainable_names(const Model& model) {
  std::set<std::string> names;
  for_each_array(model, [&](const ArrayView& a) {
    if (a.trainable) names.insert(a.name);
  });
  return names;
}

/// Loss (task + aux_coeff * load balance) and exact gradients for every
/// trainable parameter. Frozen parameters are absent from the result.
inline std::pair<LossValue, GradientSet> loss_and_grads(const Model& model, const Batch& batch,
                                                        bool classification, double aux_coeff) {
  if (batch.x.cols() != model.input_dim)
    throw DimensionError("loss_and_grads: batch " + batch.x.shape() + " for input width " +
                         std::to_string(model.input_dim));
  const std::set<std::string> trainable = trainable_names(model);
  const std::size_t n_blocks = model.blocks.size();

  // Forward with tapes.
  std::vector<detail::BlockTape> tapes(n_blocks);
  Matrix h = model.embed ? matmul(batch.x, *model.embed) : batch.x;
  LossValue lv;
  for (std::size_t b = 0; b < n_blocks; ++b) {
    auto& tp = tapes[b];
    tp.input = h;
    Matrix y;
    if (const auto* f = std::get_if<FFN>(&model.blocks[b])) {
      tp.pre = matmul(h, f->w_in);
      tp.act = apply_activation(f->activation, tp.pre);
      y = matmul(tp.act, f->w_out);
    } else {
      const auto& layer = std::get<MoELayer>(model.blocks[b]);
      tp.moe.emplace();
      y = moe_forward_batch(layer, h, nullptr, &*tp.moe);
      lv.aux += detail::load_balance(*tp.moe, layer.n_experts, layer.router.topk_count, nullptr, 0.0);
    }
    add_inplace(h, y);
    if (!h.all_finite()) throw NumericError("non-finite activations in block " + std::to_string(b));
  }
  const Matrix out = add_readout(model, h);
  Matrix d_out;
  lv.task = detail::task_loss_and_grad(out, batch, classification, &d_out);
  lv.total = lv.task + aux_coeff * lv.aux;
  if (!std::isfinite(lv.total)) throw NumericError("non-finite loss at readout");

  // Backward.
  GradientSet g;
  detail::accumulate(g, "readout", matmul_tn(h, d_out), trainable);
  Matrix d_bias(1, d_out.cols());
  for (std::size_t t = 0; t < d_out.rows(); ++t)
    for (std::size_t j = 0; j < d_out.cols(); ++j) d_bias(0, j) += d_out(t, j);
  detail::accumulate(g, "readout_bias", d_bias, trainable);
  Matrix dh = matmul_nt(d_out, model.readout);

  for (std::size_t bi = n_blocks; bi-- > 0;) {
    const auto& tp = tapes[bi];
    const std::string prefix = "block" + std::to_string(bi);
    Matrix d_in = dh;  // residual path
    if (const auto* f = std::get_if<FFN>(&model.blocks[bi])) {
      detail::accumulate(g, prefix + ".ffn.w_out", matmul_tn(tp.act, dh), trainable);
      Matrix d_pre = matmul_nt(dh, f->w_out);
      for (std::size_t i = 0; i < d_pre.size(); ++i) d_pre[i] *= activate_grad(f->activation, tp.pre[i]);
      detail::accumulate(g, prefix + ".ffn.w_in", matmul_tn(tp.input, d_pre), trainable);
      add_inplace(d_in, matmul_nt(d_pre, f->w_in));
    } else {
      const auto& layer = std::get<MoELayer>(model.blocks[bi]);
      const MoETape& mt = *tp.moe;
      const std::size_t batch_n = tp.input.rows();
      const std::size_t n = layer.n_experts;
      Matrix d_probs(batch_n, n);

      for (const MemberTape& m : mt.members) {
        // Upstream gradient for this member's rows, and routing-score grads.
        Matrix g_out(m.rows.size(), dh.cols());
        for (std::size_t r = 0; r < m.rows.size(); ++r) {
          auto up = dh.row(m.rows[r]);
          auto go = g_out.row(r);
          for (std::size_t j = 0; j < go.size(); ++j) go[j] = m.gate[r] * up[j];
          if (!m.is_universal) d_probs(m.rows[r], m.member) += dot(up, m.out.row(r));
        }
        const Matrix dw_out = matmul_tn(m.act, g_out);
        Matrix d_pre = matmul_nt(g_out, m.w_out);
        const Activation act =
            (m.is_universal && layer.universal) ? layer.universal->activation : layer.activation;
        for (std::size_t i = 0; i < d_pre.size(); ++i) d_pre[i] *= activate_grad(act, m.pre[i]);
        const Matrix dw_in = matmul_tn(m.x, d_pre);
        const Matrix dx = matmul_nt(d_pre, m.w_in);
        for (std::size_t r = 0; r < m.rows.size(); ++r) {
          auto dst = d_in.row(m.rows[r]);
          auto src = dx.row(r);
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
        if (m.is_universal && layer.universal) {
          detail::accumulate(g, prefix + ".moe.universal.w_in", dw_in, trainable);
          detail::accumulate(g, prefix + ".moe.universal.w_out", dw_out, trainable);
        } else {
          detail::route_member_grad(g, prefix + ".moe.w_in", layer.w_in, m.member, dw_in, trainable);
          detail::route_member_grad(g, prefix + ".moe.w_out", layer.w_out, m.member, dw_out, trainable);
        }
      }

      detail::load_balance(mt, n, layer.router.topk_count, &d_probs, aux_coeff);
      // Softmax backward: dz = s * (ds - <s, ds>).
      Matrix d_logits(batch_n, n);
      for (std::size_t t = 0; t < batch_n; ++t) {
        const double sd = dot(mt.probs.row(t), d_probs.row(t));
        for (std::size_t i = 0; i < n; ++i) d_logits(t, i) = mt.probs(t, i) * (d_probs(t, i) - sd);
      }
      detail::accumulate(g, prefix + ".moe.router", matmul_tn(tp.input, d_logits), trainable);
      add_inplace(d_in, matmul_nt(d_logits, layer.router.w_r));
    }
    dh = std::move(d_in);
  }
  if (model.embed) detail::accumulate(g, "embed", matmul_tn(batch.x, dh), trainable);

  // Trainable parameters that received no gradient this batch (e.g. experts
  // nobody routed to) get explicit zeros so every step sees the full set.
  for_each_array(model, [&](const ArrayView& a) {
    if (!a.trainable || g.count(a.name)) return;
    g.emplace(a.name, Matrix(1, a.count));
  });
  for (auto& [name, m] : g) {
    if (!m.all_finite()) throw NumericError("non-finite gradient for " + name);
  }
  return {lv, std::move(g)};
}

/// Loss only (used by finite-difference checks and evaluation).
inline LossValue loss_value(const Model& model, const Batch& batch, bool classification,
                            double aux_coeff) {
  Matrix h = model.embed ? matmul(batch.x, *model.embed) : batch.x;
  LossValue lv;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    Matrix y;
    if (const auto* f = std::get_if<FFN>(&model.blocks[b])) {
      y = ffn_forward(*f, h);
    } else {
      const auto& layer = std::get<MoELayer>(model.blocks[b]);
      MoETape tape;
      y = moe_forward_batch(layer, h, nullptr, &tape);
      lv.aux += detail::load_balance(tape, layer.n_experts, layer.router.topk_count, nullptr, 0.0);
    }
    add_inplace(h, y);
  }
  lv.task = detail::task_loss_and_grad(add_readout(model, h), batch, classification, nullptr);
  lv.total = lv.task + aux_coeff * lv.aux;
  return lv;
}

/// Per-row top-k sets of every MoE layer for a batch (for detecting routing
/// changes under parameter perturbation).
inline std::vector<std::vector<std::vector<std::size_t>>> routing_sets(const Model& model,
                                                                       const Matrix& x) {
  std::vector<std::vector<std::vector<std::size_t>>> out;
  Matrix h = model.embed ? matmul(x, *model.embed) : x;
  for (const auto& block : model.blocks) {
    Matrix y;
    if (const auto* f = std::get_if<FFN>(&block)) {
      y = ffn_forward(*f, h);
    } else {
      MoETape tape;
      y = moe_forward_batch(std::get<MoELayer>(block), h, nullptr, &tape);
      out.push_back(tape.selected);
    }
    add_inplace(h, y);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  std::size_t samples = 0;
  double mse = 0.0;            // mean over all output entries (regression)
  double r2 = 0.0;             // 1 - SSE/SST (regression)
  double cross_entropy = 0.0;  // classification
  double accuracy = 0.0;       // percent: 100*R^2 (regression) or % correct
};

inline EvalResult evaluate(const Model& model, const Dataset& ds, bool classification) {
  const Matrix out = model_forward(model, ds.x);
  EvalResult r;
  r.samples = ds.size();
  if (!classification) {
    double sse = 0.0, sst = 0.0;
    for (std::size_t j = 0; j < out.cols(); ++j) {
      double mean = 0.0;
      for (std::size_t t = 0; t < out.rows(); ++t) mean += ds.y(t, j);
      mean /= static_cast<double>(out.rows());
      for (std::size_t t = 0; t < out.rows(); ++t) {
        const double e = out(t, j) - ds.y(t, j);
        const double c = ds.y(t, j) - mean;
        sse += e * e;
        sst += c * c;
      }
    }
    r.mse = sse / static_cast<double>(out.size());
    r.r2 = sst > 0.0 ? 1.0 - sse / sst : 0.0;
    r.accuracy = 100.0 * r.r2;
    return r;
  }
  std::size_t correct = 0;
  for (std::size_t t = 0; t < out.rows(); ++t) {
    const auto row = out.row(t);
    const std::size_t pred = topk_indices(row, 1)[0];
    correct += pred == ds.labels[t] ? 1 : 0;
    const RowVector p = softmax(row);
    r.cross_entropy -= std::log(std::max(p[ds.labels[t]], 1e-300));
  }
  r.cross_entropy /= static_cast<double>(out.rows());
  r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(out.rows());
  return r;
}

// ---------------------------------------------------------------------------
// Optimisation

enum class OptimizerKind : std::uint8_t { sgd = 0, adam = 1 };
enum class LrSchedule : std::uint8_t { constant = 0, cosine = 1, linear = 2 };

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  LrSchedule schedule = LrSchedule::constant;
  double aux_loss_coeff = 0.01;
  std::size_t eval_every = 100;
  std::uint64_t seed = 0;
};

inline void validate_train_config(const TrainConfig& c) {
  if (c.steps < 1) throw ConfigError("train: steps must be >= 1");
  if (c.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) throw ConfigError("train: lr must be >= 0");
  if (!(c.aux_loss_coeff >= 0.0)) throw ConfigError("train: aux_loss_coeff must be >= 0");
  if (c.optimizer == OptimizerKind::adam &&
      !(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0 && c.eps > 0.0))
    throw ConfigError("train: adam betas must lie in [0, 1) and eps > 0");
  if (c.eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
}

inline double scheduled_lr(const TrainConfig& c, std::size_t step) {
  const double frac = static_cast<double>(step) / static_cast<double>(c.steps);
  switch (c.schedule) {
    case LrSchedule::constant: return c.lr;
    case LrSchedule::cosine: return c.lr * 0.5 * (1.0 + std::cos(3.141592653589793 * frac));
    case LrSchedule::linear: return c.lr * (1.0 - frac);
  }
  return c.lr;
}

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(Model& model, const GradientSet& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for_each_trainable(model, [&](const std::string& name, std::span<double> p) {
      auto it = grads.find(name);
      if (it == grads.end()) return;
      const auto gd = it->second.data();
      if (gd.size() != p.size()) throw DimensionError("optimizer: gradient size mismatch for " + name);
      if (cfg_.optimizer == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * gd[i];
        return;
      }
      auto& st = state_[name];
      if (st.m.size() != p.size()) {
        st.m.assign(p.size(), 0.0);
        st.v.assign(p.size(), 0.0);
      }
      for (std::size_t i = 0; i < p.size(); ++i) {
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gd[i];
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gd[i] * gd[i];
        const double mh = st.m[i] / bc1;
        const double vh = st.v[i] / bc2;
        p[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
      }
    });
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  TrainConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

struct TraceRow {
  std::size_t step = 0;
  double loss = 0.0;
  double aux_loss = 0.0;
  std::optional<double> eval_metric;
};

inline std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::string out = "step,loss,aux_loss,eval_metric\n";
  for (const auto& r : trace) {
    out += std::to_string(r.step) + "," + format_double(r.loss) + "," + format_double(r.aux_loss) +
           "," + (r.eval_metric ? format_double(*r.eval_metric) : std::string()) + "\n";
  }
  return out;
}

class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, std::vector<TraceRow> trace)
      : NumericError(what), trace_(std::move(trace)) {}
  const std::vector<TraceRow>& trace() const noexcept { return trace_; }

 private:
  std::vector<TraceRow> trace_;
};

struct TrainResult {
  Model final_model;
  Model best_model;
  double best_metric = 0.0;
  std::size_t best_step = 0;
  std::vector<TraceRow> trace;
};

inline constexpr std::uint64_t kStreamBatches = 0xBA7C;

/// Deterministic minibatch training. Batches come from epoch-wise shuffles
/// of the training split; eval accuracy is recorded every eval_every steps
/// and after the last step.
inline TrainResult train_loop(const Model& initial, const SyntheticTask& task, const TrainConfig& cfg) {
  validate_train_config(cfg);
  TrainResult res;
  res.final_model = initial;
  Model& model = res.final_model;
  Optimizer opt(cfg);
  RngStream rng(cfg.seed, stream_id({kStreamBatches}));
  const std::size_t n = task.train.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::size_t cursor = n;
  bool have_best = false;

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<std::size_t> rows;
    rows.reserve(cfg.batch_size);
    while (rows.size() < cfg.batch_size) {
      if (cursor == n) {
        rng.shuffle(order);
        cursor = 0;
      }
      rows.push_back(order[cursor++]);
    }
    const Batch batch = gather_batch(task.train, rows);
    TraceRow row;
    row.step = step;
    try {
      auto [lv, grads] = loss_and_grads(model, batch, task.classification(), cfg.aux_loss_coeff);
      row.loss = lv.total;
      row.aux_loss = lv.aux;
      opt.step(model, grads, scheduled_lr(cfg, step - 1));
    } catch (const NumericError& e) {
      throw DivergenceError(std::string("training diverged at step ") + std::to_string(step) +
                                ": " + e.what(),
                            res.trace);
    }
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      const double metric = evaluate(model, task.eval, task.classification()).accuracy;
      row.eval_metric = metric;
      if (!have_best || metric > res.best_metric) {
        have_best = true;
        res.best_metric = metric;
        res.best_step = step;
        res.best_model = model;
      }
    }
    res.trace.push_back(row);
  }
  res.final_model.seeds["train"] = cfg.seed;
  res.best_model.seeds["train"] = cfg.seed;
  return res;
}

}  // namespace ders
