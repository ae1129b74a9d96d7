// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "ders/accounting.hpp"
#include "ders/compress.hpp"
#include "ders/train.hpp"
#include "ders/upcycle.hpp"

using namespace ders;

namespace {

Model vanilla(std::size_t d, std::size_t d_h, std::size_t n, bool universal, std::uint64_t seed) {
  RngStream rng(seed, 1);
  const Model dense = make_dense_model(6, 3, d, d_h, 2, Activation::gelu, rng);
  UpcycleConfig uc;
  uc.n_experts = n;
  uc.topk_count = 2;
  uc.parallel_universal = universal;
  uc.seed = seed;
  return upcycle(dense, uc);
}

// Stand-in for fine-tuning: small random moves of every trainable value.
Model perturbed(Model m, double scale, std::uint64_t seed) {
  RngStream rng(seed, 77);
  for_each_trainable(m, [&](const std::string&, std::span<double> p) {
    for (double& v : p) v += rng.uniform(-scale, scale);
  });
  return m;
}

Matrix inputs(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed, 2);
  return uniform_matrix(n, 6, -1.0, 1.0, rng);
}

SyntheticTask small_task() {
  TaskParams tp;
  tp.input_dim = 8;
  tp.output_dim = 2;
  tp.n_clusters = 4;
  tp.n_train = 512;
  tp.n_eval = 256;
  tp.seed = 13;
  return make_task(tp);
}

}  // namespace

TEST(ChooseBase, UntrainedBaseEqualsEveryExpert) {
  const Model m = vanilla(8, 16, 4, false, 1);
  const auto bases = choose_base(m);
  ASSERT_EQ(bases.size(), 2u);
  for (const LayerBase& lb : bases) {
    const auto& layer = std::get<MoELayer>(m.blocks[lb.block]);
    for (std::size_t e = 0; e < 4; ++e) {
      EXPECT_EQ(synthesize(layer.w_in.base, layer.w_in.deltas[e]), lb.w_in);
      EXPECT_EQ(synthesize(layer.w_out.base, layer.w_out.deltas[e]), lb.w_out);
    }
  }
}

TEST(ChooseBase, TrainedExpertsMoveAwayFromBase) {
  const Model m = perturbed(vanilla(8, 16, 4, false, 1), 0.01, 3);
  const auto bases = choose_base(m);
  const auto& layer = std::get<MoELayer>(m.blocks[bases[0].block]);
  double moved = 0.0;
  for (std::size_t e = 0; e < 4; ++e)
    moved = std::max(moved, max_abs(decompose(bases[0].w_in, synthesize(layer.w_in.base, layer.w_in.deltas[e])).mat));
  EXPECT_GT(moved, 0.0);
}

TEST(ChooseBase, RejectsModelsWithoutInitRecord) {
  RngStream rng(1, 1);
  const Model dense = make_dense_model(6, 3, 8, 16, 1, Activation::gelu, rng);
  EXPECT_THROW(choose_base(dense), StateError);
  UpcycleConfig uc;
  uc.method = UpcycleMethod::ders_sm;
  const Model sm = upcycle(dense, uc);
  EXPECT_THROW(choose_base(sm), StateError);
  EXPECT_THROW(ders_compress(sm, CompressionSpec{}), StateError);
}

TEST(DersCompress, DenseReplacementIsBitIdentical) {
  const Model m = perturbed(vanilla(8, 16, 4, true, 2), 0.01, 4);
  CompressionSpec spec;
  spec.technique = CompressTechnique::dense;
  const Model c = ders_compress(m, spec);
  const Matrix x = inputs(64, 5);
  EXPECT_EQ(model_forward(c, x), model_forward(m, x));
}

TEST(DersCompress, ZeroDropRateKeepsOutputs) {
  const Model m = perturbed(vanilla(8, 16, 4, false, 2), 0.01, 4);
  CompressionSpec spec;
  spec.drop_rate = 0.0;
  const Model c = ders_compress(m, spec);
  const Matrix x = inputs(64, 6);
  EXPECT_LE(max_abs(subtract(model_forward(c, x), model_forward(m, x))), 1e-12);
}

TEST(DersCompress, Quantize16StaysClose) {
  const Model m = perturbed(vanilla(8, 16, 4, false, 2), 0.05, 4);
  CompressionSpec spec;
  spec.technique = CompressTechnique::quantize;
  spec.bit_width = 16;
  const Model c = ders_compress(m, spec);
  const Matrix x = inputs(64, 7);
  EXPECT_LE(max_abs(subtract(model_forward(c, x), model_forward(m, x))), 1e-2);
}

TEST(DersCompress, QuantizeBitsMatchStorageLaw) {
  const std::size_t d = 8, d_h = 16, n = 4;
  const Model m = perturbed(vanilla(d, d_h, n, false, 2), 0.01, 4);
  CompressionSpec spec;
  spec.technique = CompressTechnique::quantize;
  spec.bit_width = 2;
  CompressionReport rep;
  const Model c = ders_compress(m, spec, &rep, 16);
  ASSERT_EQ(rep.layers.size(), 2u);
  for (const auto& l : rep.layers) {
    // Two matrices per layer, each d*d_h.
    EXPECT_EQ(l.stored_bits_before, 2u * n * 16 * d * d_h);
    EXPECT_EQ(l.stored_bits_after, 2u * (16 + n * 2) * d * d_h);
    // One 16-bit scale per delta per matrix, flagged separately.
    EXPECT_EQ(l.overhead_bits_after, 2u * n * 16);
  }
  const ParamReport pr = count_report(c, 16);
  EXPECT_EQ(pr.layers[1].group->w_in.stored_bits, (16u + n * 2) * d * d_h);
}

TEST(DersCompress, SparsifyEquivalentExpertRatio) {
  const std::size_t n = 4;
  const Model m = perturbed(vanilla(8, 16, n, false, 2), 0.01, 4);
  for (double p : {0.0, 0.5, 0.75, 0.9375}) {
    CompressionSpec spec;
    spec.drop_rate = p;
    spec.mask = MaskMode::exact_count;
    CompressionReport rep;
    const Model c = ders_compress(m, spec, &rep, 16);
    const double expected = (1.0 + n * (1.0 - p)) / n;
    for (const auto& l : rep.layers) EXPECT_NEAR(l.equivalent_expert_ratio, expected, 1e-9) << p;
    const ParamReport pr = count_report(c, 16);
    for (const auto& l : pr.layers)
      if (l.equivalent_expert_ratio) {
        EXPECT_NEAR(*l.equivalent_expert_ratio, expected, 1e-9) << p;
      }
  }
}

TEST(DersCompress, SparsifyStoredValuesWithinRounding) {
  const std::size_t d = 8, d_h = 16, n = 4;
  const Model m = perturbed(vanilla(d, d_h, n, false, 2), 0.01, 4);
  CompressionSpec spec;
  spec.drop_rate = 0.9;
  spec.mask = MaskMode::exact_count;
  const ParamReport pr = count_report(ders_compress(m, spec), 64);
  const double law = (1.0 + n * (1.0 - 0.9)) * d * d_h;
  for (const auto& l : pr.layers)
    if (l.group) {
      EXPECT_LE(std::abs(static_cast<double>(l.group->w_in.param_values) - law), static_cast<double>(n));
      EXPECT_LE(std::abs(static_cast<double>(l.group->w_out.param_values) - law), static_cast<double>(n));
    }
}

TEST(DersCompress, ExtendedCompressesNPlusOneDeltas) {
  const Model m = perturbed(vanilla(8, 16, 4, true, 2), 0.01, 4);
  CompressionSpec spec;
  spec.extended = true;
  spec.drop_rate = 0.0;
  const Model c = ders_compress(m, spec);
  for (const auto& b : c.blocks) {
    const auto& l = std::get<MoELayer>(b);
    EXPECT_EQ(l.w_in.deltas.size(), 5u);
    EXPECT_EQ(l.w_out.deltas.size(), 5u);
    EXPECT_FALSE(l.universal.has_value());
  }
  const Matrix x = inputs(32, 8);
  EXPECT_LE(max_abs(subtract(model_forward(c, x), model_forward(m, x))), 1e-12);
}

TEST(DersCompress, ExtendedWithoutUniversalIsStateError) {
  CompressionSpec spec;
  spec.extended = true;
  EXPECT_THROW(ders_compress(vanilla(8, 16, 4, false, 2), spec), StateError);
}

TEST(DersCompress, NonExtendedLeavesUniversalUntouched) {
  const Model m = perturbed(vanilla(8, 16, 4, true, 2), 0.01, 4);
  const Model c = ders_compress(m, CompressionSpec{});
  for (std::size_t b = 0; b < c.blocks.size(); ++b) {
    EXPECT_EQ(std::get<MoELayer>(c.blocks[b]).universal, std::get<MoELayer>(m.blocks[b]).universal);
    EXPECT_EQ(std::get<MoELayer>(c.blocks[b]).w_in.deltas.size(), 4u);
  }
}

TEST(DersCompress, InvalidSpecsAreConfigErrors) {
  const Model m = vanilla(8, 16, 4, false, 2);
  CompressionSpec spec;
  spec.drop_rate = 1.0;
  EXPECT_THROW(ders_compress(m, spec), ConfigError);
  spec = {};
  spec.technique = CompressTechnique::quantize;
  spec.bit_width = 3;
  EXPECT_THROW(ders_compress(m, spec), ConfigError);
}

TEST(DersCompress, MasksDifferPerExpertAndRepeatPerSeed) {
  const Model m = perturbed(vanilla(8, 16, 4, false, 2), 0.01, 4);
  CompressionSpec spec;
  spec.seed = 21;
  const Model a = ders_compress(m, spec), b = ders_compress(m, spec);
  EXPECT_EQ(a, b);
  const auto& l = std::get<MoELayer>(a.blocks[0]);
  EXPECT_NE(std::get<SparseDelta>(l.w_in.deltas[0]).index, std::get<SparseDelta>(l.w_in.deltas[1]).index);
}

TEST(DersCompress, AccuracyDegradesMonotonicallyInDropRate) {
  const SyntheticTask task = small_task();
  RngStream rng(3, 3);
  const Model dense = make_dense_model(8, 2, 16, 32, 1, Activation::gelu, rng);
  UpcycleConfig uc;
  uc.n_experts = 4;
  uc.topk_count = 2;
  uc.seed = 4;
  TrainConfig tc;
  tc.steps = 300;
  tc.batch_size = 32;
  tc.lr = 3e-3;
  tc.eval_every = 300;
  tc.seed = 5;
  const Model trained = train_loop(upcycle(dense, uc), task, tc).final_model;

  double prev = evaluate(trained, task.eval, false).accuracy;
  for (double p : {0.5, 0.9, 0.99, 0.999}) {
    CompressionSpec spec;
    spec.drop_rate = p;
    spec.seed = 6;
    const double acc = evaluate(ders_compress(trained, spec), task.eval, false).accuracy;
    EXPECT_LE(acc, prev + 1.0) << "p=" << p;
    prev = std::min(prev, acc);
  }
}
