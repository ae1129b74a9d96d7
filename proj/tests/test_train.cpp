// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "ders/train.hpp"
#include "ders/upcycle.hpp"

using namespace ders;

namespace {

SyntheticTask regression_task(std::size_t in, std::size_t out, std::size_t clusters, std::uint64_t seed,
                              std::size_t n_train = 256, std::size_t n_eval = 128) {
  TaskParams tp;
  tp.input_dim = in;
  tp.output_dim = out;
  tp.n_clusters = clusters;
  tp.n_train = n_train;
  tp.n_eval = n_eval;
  tp.seed = seed;
  return make_task(tp);
}

Batch first_rows(const Dataset& ds, std::size_t n) {
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  return gather_batch(ds, rows);
}

// Central differences over every trainable entry; returns the worst relative
// error and the parameter it occurred in.
std::pair<double, std::string> worst_fd_error(Model m, const Batch& b, bool cls, double aux) {
  auto [lv, g] = loss_and_grads(m, b, cls, aux);
  double worst = 0.0;
  std::string where;
  for_each_trainable(m, [&](const std::string& name, std::span<double> p) {
    const auto& gm = g.at(name).data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i], h = 1e-5;
      p[i] = orig + h;
      const double lp = loss_value(m, b, cls, aux).total;
      p[i] = orig - h;
      const double lm = loss_value(m, b, cls, aux).total;
      p[i] = orig;
      const double num = (lp - lm) / (2 * h);
      const double rel = std::abs(num - gm[i]) / std::max({std::abs(num), std::abs(gm[i]), 1e-6});
      if (rel > worst) {
        worst = rel;
        where = name;
      }
    }
  });
  return {worst, where};
}

Model jittered(Model m, std::uint64_t seed, double scale = 0.1) {
  RngStream rng(seed, 5);
  for_each_trainable(m, [&](const std::string&, std::span<double> p) {
    for (double& v : p) v += scale * rng.normal();
  });
  return m;
}

// Solves (A^T A) w = A^T y column-wise by Gaussian elimination with partial
// pivoting; A carries an appended bias column.
Matrix least_squares(const Matrix& x, const Matrix& y) {
  const std::size_t n = x.rows(), p = x.cols() + 1;
  Matrix a(n, p);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < x.cols(); ++j) a(t, j) = x(t, j);
    a(t, p - 1) = 1.0;
  }
  Matrix g = matmul_tn(a, a);
  Matrix rhs = matmul_tn(a, y);
  for (std::size_t c = 0; c < p; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < p; ++r)
      if (std::abs(g(r, c)) > std::abs(g(piv, c))) piv = r;
    for (std::size_t j = 0; j < p; ++j) std::swap(g(c, j), g(piv, j));
    for (std::size_t j = 0; j < rhs.cols(); ++j) std::swap(rhs(c, j), rhs(piv, j));
    for (std::size_t r = 0; r < p; ++r) {
      if (r == c) continue;
      const double f = g(r, c) / g(c, c);
      for (std::size_t j = 0; j < p; ++j) g(r, j) -= f * g(c, j);
      for (std::size_t j = 0; j < rhs.cols(); ++j) rhs(r, j) -= f * rhs(c, j);
    }
  }
  for (std::size_t r = 0; r < p; ++r)
    for (std::size_t j = 0; j < rhs.cols(); ++j) rhs(r, j) /= g(r, r);
  return rhs;
}

double affine_mse(const Matrix& w, const Dataset& ds) {
  double sse = 0.0;
  const std::size_t p = w.rows();
  for (std::size_t t = 0; t < ds.size(); ++t)
    for (std::size_t j = 0; j < ds.y.cols(); ++j) {
      double yhat = w(p - 1, j);
      for (std::size_t i = 0; i + 1 < p; ++i) yhat += ds.x(t, i) * w(i, j);
      sse += (yhat - ds.y(t, j)) * (yhat - ds.y(t, j));
    }
  return sse / static_cast<double>(ds.y.size());
}

}  // namespace

TEST(Gradients, LinearReadoutMatchesHandDerivation) {
  const SyntheticTask task = regression_task(5, 3, 2, 1);
  RngStream rng(2, 2);
  const Model m = make_dense_model(5, 3, 5, 4, 0, Activation::gelu, rng, false);
  const Batch b = first_rows(task.train, 7);
  auto [lv, g] = loss_and_grads(m, b, false, 0.0);

  const Matrix yhat = add_readout(m, b.x);
  const Matrix e = subtract(yhat, b.y);
  const Matrix expect = scaled(matmul_tn(b.x, e), 2.0 / 7.0);
  EXPECT_LE(max_abs(subtract(g.at("readout"), expect)), 1e-14);
  double sse = 0.0;
  for (double v : e.data()) sse += v * v;
  EXPECT_NEAR(lv.task, sse / 7.0, 1e-14);
  EXPECT_EQ(lv.aux, 0.0);
}

TEST(Gradients, FiniteDifferencesAllParameterClasses) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (bool cls : {false, true}) {
      TaskParams tp;
      tp.seed = seed;
      if (cls) {
        tp.kind = TaskKind::modular_classification;
        tp.modulus = 5;
        tp.n_train = 16;
        tp.n_eval = 4;
      } else {
        tp.input_dim = 6;
        tp.output_dim = 3;
        tp.n_train = 32;
        tp.n_eval = 8;
      }
      const SyntheticTask task = make_task(tp);
      const Batch b = first_rows(task.train, 8);
      struct Case {
        UpcycleMethod method;
        bool universal, extended;
      };
      for (const Case c : {Case{UpcycleMethod::vanilla, true, false}, Case{UpcycleMethod::ders_sm, true, false},
                           Case{UpcycleMethod::ders_lm, false, false}, Case{UpcycleMethod::ders_sm, true, true},
                           Case{UpcycleMethod::ders_lm, true, true}}) {
        RngStream rng(seed, 1);
        const Model dense = make_dense_model(task.input_dim(), task.output_dim(), 5, 7, 2, Activation::gelu, rng);
        UpcycleConfig uc;
        uc.method = c.method;
        uc.n_experts = 3;
        uc.topk_count = 2;
        uc.sparse_rate = 0.5;
        uc.rank = 2;
        uc.parallel_universal = c.universal;
        uc.extended = c.extended;
        uc.layer_pattern = LayerPattern::every_other_layer;
        uc.seed = seed + 3;
        const Model m = jittered(upcycle(dense, uc), seed);
        const auto [worst, where] = worst_fd_error(m, b, cls, 0.01);
        EXPECT_LT(worst, 1e-4) << "seed " << seed << " cls " << cls << " at " << where;
      }
    }
  }
}

TEST(Gradients, EveryTrainableParameterHasAGradient) {
  RngStream rng(1, 1);
  UpcycleConfig uc;
  uc.method = UpcycleMethod::ders_lm;
  uc.parallel_universal = true;
  const Model m = upcycle(make_dense_model(6, 3, 8, 16, 2, Activation::gelu, rng), uc);
  const Batch b = first_rows(regression_task(6, 3, 2, 1).train, 4);
  auto [lv, g] = loss_and_grads(m, b, false, 0.01);
  std::set<std::string> keys;
  for (const auto& [k, v] : g) keys.insert(k);
  EXPECT_EQ(keys, trainable_names(m));
}

TEST(Gradients, SparseValuesMatchDenseOracleAtIndices) {
  RngStream rng(4, 4);
  UpcycleConfig uc;
  uc.method = UpcycleMethod::ders_sm;
  uc.sparse_rate = 0.75;
  uc.topk_count = 2;
  uc.seed = 8;
  const Model m = jittered(upcycle(make_dense_model(6, 3, 8, 16, 1, Activation::gelu, rng), uc), 3, 0.05);

  // Oracle: the same weights with every sparse delta held densely.
  Model oracle = m;
  auto& ol = std::get<MoELayer>(oracle.blocks[0]);
  for (auto* grp : {&ol.w_in, &ol.w_out})
    for (auto& d : grp->deltas) d = DenseDelta{materialize(d)};

  const Batch b = first_rows(regression_task(6, 3, 2, 5).train, 16);
  auto [lv, g] = loss_and_grads(m, b, false, 0.01);
  auto [olv, og] = loss_and_grads(oracle, b, false, 0.01);
  EXPECT_NEAR(lv.total, olv.total, 1e-13);

  const auto& l = std::get<MoELayer>(m.blocks[0]);
  for (std::size_t e = 0; e < l.n_experts; ++e) {
    const auto& sd = std::get<SparseDelta>(l.w_in.deltas[e]);
    const std::string name = "block0.moe.w_in.delta" + std::to_string(e);
    const Matrix& dense_grad = og.at(name + ".dense");
    const Matrix& values_grad = g.at(name + ".values");
    ASSERT_EQ(values_grad.size(), sd.index.size());
    for (std::size_t j = 0; j < sd.index.size(); ++j) {
      const double want = dense_grad.data()[sd.index[j]] / sd.keep_fraction;
      EXPECT_NEAR(values_grad.data()[j], want, 1e-12 * std::max(1.0, std::abs(want)));
    }
  }
  // Shared base gradient is the same in both parameterisations.
  EXPECT_LE(max_abs(subtract(g.at("block0.moe.w_in.base"), og.at("block0.moe.w_in.base"))), 1e-12);
}

TEST(Gradients, NonFiniteActivationNamesBlock) {
  RngStream rng(1, 1);
  Model m = make_dense_model(6, 3, 8, 16, 2, Activation::gelu, rng);
  std::get<FFN>(m.blocks[1]).w_in(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const Batch b = first_rows(regression_task(6, 3, 2, 1).train, 4);
  try {
    loss_and_grads(m, b, false, 0.0);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("block 1"), std::string::npos) << e.what();
  }
}

TEST(TrainLoop, ZeroLearningRateLeavesParametersUntouched) {
  const SyntheticTask task = regression_task(6, 3, 2, 1);
  RngStream rng(1, 1);
  UpcycleConfig uc;
  uc.method = UpcycleMethod::ders_sm;
  const Model m = upcycle(make_dense_model(6, 3, 8, 16, 2, Activation::gelu, rng), uc);
  for (OptimizerKind opt : {OptimizerKind::adam, OptimizerKind::sgd}) {
    TrainConfig tc;
    tc.steps = 20;
    tc.lr = 0.0;
    tc.optimizer = opt;
    tc.eval_every = 10;
    TrainResult r = train_loop(m, task, tc);
    r.final_model.seeds = m.seeds;
    EXPECT_EQ(r.final_model, m);
  }
}

TEST(TrainLoop, SameSeedsSameTraceAndWeights) {
  const SyntheticTask task = regression_task(6, 3, 3, 2);
  RngStream rng(1, 1);
  UpcycleConfig uc;
  uc.method = UpcycleMethod::ders_lm;
  uc.parallel_universal = true;
  const Model m = upcycle(make_dense_model(6, 3, 8, 16, 2, Activation::gelu, rng), uc);
  TrainConfig tc;
  tc.steps = 40;
  tc.batch_size = 16;
  tc.eval_every = 10;
  tc.seed = 9;
  tc.schedule = LrSchedule::cosine;
  const TrainResult a = train_loop(m, task, tc);
  const TrainResult b = train_loop(m, task, tc);
  EXPECT_EQ(trace_csv(a.trace), trace_csv(b.trace));
  EXPECT_EQ(a.final_model, b.final_model);
  EXPECT_EQ(a.best_model, b.best_model);
  tc.seed = 10;
  EXPECT_NE(trace_csv(train_loop(m, task, tc).trace), trace_csv(a.trace));
}

TEST(TrainLoop, TraceHasEvalRowsAndBestCheckpoint) {
  const SyntheticTask task = regression_task(6, 3, 2, 1);
  RngStream rng(1, 1);
  const Model m = make_dense_model(6, 3, 8, 16, 1, Activation::gelu, rng);
  TrainConfig tc;
  tc.steps = 25;
  tc.eval_every = 10;
  const TrainResult r = train_loop(m, task, tc);
  ASSERT_EQ(r.trace.size(), 25u);
  for (const auto& row : r.trace) EXPECT_EQ(row.eval_metric.has_value(), row.step % 10 == 0 || row.step == 25);
  EXPECT_NEAR(r.best_metric, evaluate(r.best_model, task.eval, false).accuracy, 1e-12);
  EXPECT_EQ(trace_csv(r.trace).substr(0, 31), "step,loss,aux_loss,eval_metric\n");
}

TEST(TrainLoop, DivergenceRaisesWithTrace) {
  const SyntheticTask task = regression_task(6, 3, 2, 1);
  RngStream rng(1, 1);
  const Model m = make_dense_model(6, 3, 8, 16, 2, Activation::relu, rng);
  TrainConfig tc;
  tc.steps = 200;
  tc.lr = 1e6;
  tc.optimizer = OptimizerKind::sgd;
  try {
    train_loop(m, task, tc);
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_FALSE(e.trace().empty());
  }
}

TEST(TrainLoop, InvalidConfigs) {
  const SyntheticTask task = regression_task(6, 3, 2, 1);
  RngStream rng(1, 1);
  const Model m = make_dense_model(6, 3, 8, 16, 1, Activation::gelu, rng);
  TrainConfig tc;
  tc.steps = 0;
  EXPECT_THROW(train_loop(m, task, tc), ConfigError);
  tc = {};
  tc.lr = -1.0;
  EXPECT_THROW(train_loop(m, task, tc), ConfigError);
  tc = {};
  tc.beta1 = 1.0;
  EXPECT_THROW(train_loop(m, task, tc), ConfigError);
}

TEST(TrainLoop, DenseBeatsBestAffineMap) {
  const SyntheticTask task = regression_task(16, 4, 4, 7, 2048, 512);
  const double oracle = affine_mse(least_squares(task.train.x, task.train.y), task.eval);
  RngStream rng(3, 3);
  const Model m = make_dense_model(16, 4, 32, 64, 2, Activation::gelu, rng);
  TrainConfig tc;
  tc.steps = 2000;
  tc.batch_size = 64;
  tc.lr = 3e-3;
  tc.eval_every = 500;
  tc.seed = 1;
  const TrainResult r = train_loop(m, task, tc);
  const double mse = evaluate(r.final_model, task.eval, false).mse;
  EXPECT_LT(mse, oracle) << "affine oracle " << oracle;
}

TEST(Task, SingleClusterIsNearlySolvable) {
  const SyntheticTask task = regression_task(8, 2, 1, 3, 1024, 256);
  RngStream rng(3, 3);
  const Model m = make_dense_model(8, 2, 16, 32, 1, Activation::gelu, rng);
  TrainConfig tc;
  tc.steps = 1500;
  tc.batch_size = 64;
  tc.lr = 3e-3;
  tc.eval_every = 1500;
  const EvalResult ev = evaluate(train_loop(m, task, tc).final_model, task.eval, false);
  EXPECT_LT(ev.mse, 1e-2);
  EXPECT_GT(ev.r2, 0.95);
}

TEST(Task, SameSeedSameData) {
  const SyntheticTask a = regression_task(8, 2, 3, 4), b = regression_task(8, 2, 3, 4);
  EXPECT_EQ(a.train.x, b.train.x);
  EXPECT_EQ(a.eval.y, b.eval.y);
  EXPECT_NE(a.train.x, regression_task(8, 2, 3, 5).train.x);
}

TEST(Task, TrainAndEvalAreDisjoint) {
  const SyntheticTask r = regression_task(8, 2, 3, 4);
  std::set<std::vector<double>> train_rows;
  for (std::size_t t = 0; t < r.train.size(); ++t) {
    const auto row = r.train.x.row(t);
    train_rows.emplace(row.begin(), row.end());
  }
  for (std::size_t t = 0; t < r.eval.size(); ++t) {
    const auto row = r.eval.x.row(t);
    EXPECT_EQ(train_rows.count(std::vector<double>(row.begin(), row.end())), 0u);
  }

  TaskParams tp;
  tp.kind = TaskKind::modular_classification;
  tp.modulus = 7;
  tp.n_train = 30;
  tp.n_eval = 19;
  const SyntheticTask c = make_task(tp);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  auto decode = [&](const Dataset& ds, std::size_t t) {
    std::size_t a = 0, b = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      if (ds.x(t, j) == 1.0) a = j;
      if (ds.x(t, 7 + j) == 1.0) b = j;
    }
    return std::pair{a, b};
  };
  for (std::size_t t = 0; t < c.train.size(); ++t) {
    const auto [a, b] = decode(c.train, t);
    EXPECT_EQ(c.train.labels[t], (a + b) % 7);
    seen.insert({a, b});
  }
  for (std::size_t t = 0; t < c.eval.size(); ++t) EXPECT_EQ(seen.count(decode(c.eval, t)), 0u);
}

TEST(Task, InvalidParamsAreConfigErrors) {
  TaskParams tp;
  tp.n_clusters = 0;
  EXPECT_THROW(make_task(tp), ConfigError);
  tp = {};
  tp.kind = TaskKind::modular_classification;
  tp.modulus = 5;
  tp.n_train = 20;
  tp.n_eval = 10;
  EXPECT_THROW(make_task(tp), ConfigError);
  tp = {};
  tp.n_train = 0;
  EXPECT_THROW(make_task(tp), ConfigError);
}
