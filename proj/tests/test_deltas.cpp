// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "ders/deltas.hpp"

using namespace ders;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  RngStream rng(seed, 17);
  return uniform_matrix(r, c, -scale, scale, rng);
}

double rel_frob(const Matrix& approx, const Matrix& ref) {
  return frobenius_norm(subtract(approx, ref)) / frobenius_norm(ref);
}

}  // namespace

TEST(Decompose, EqualInputsGiveZero) {
  const Matrix b = random_matrix(3, 4, 1);
  EXPECT_EQ(decompose(b, b).mat, Matrix(3, 4));
}

TEST(Decompose, HandArithmetic) {
  EXPECT_EQ(decompose(Matrix::from_rows({{1, 2}}), Matrix::from_rows({{1.5, 1.5}})).mat,
            Matrix::from_rows({{0.5, -0.5}}));
}

TEST(Decompose, ShapeMismatch) { EXPECT_THROW(decompose(Matrix(2, 2), Matrix(2, 3)), DimensionError); }

TEST(Decompose, RoundTripExactNearBase) {
  // trained within a factor of two of base (the fine-tuning regime): the
  // subtraction is exact, so synthesis recovers trained bit for bit.
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Matrix base = random_matrix(8, 9, s);
    Matrix trained = base;
    RngStream rng(s, 3);
    for (double& v : trained.data()) v *= 1.0 + rng.uniform(-0.3, 0.3);
    EXPECT_EQ(synthesize(base, decompose(base, trained)), trained);
  }
}

TEST(Synthesize, EmptySparseLeavesBase) {
  const Matrix base = random_matrix(3, 3, 2);
  EXPECT_EQ(synthesize(base, SparseDelta{3, 3, {}, {}, 1.0}), base);
}

TEST(Synthesize, ZeroLowRankLeavesBase) {
  const Matrix base = random_matrix(4, 5, 3);
  EXPECT_EQ(synthesize(base, LowRankDelta{random_matrix(4, 2, 4), Matrix(2, 5)}), base);
}

TEST(Synthesize, DenseMatchesElementwiseSum) {
  const Matrix base = random_matrix(4, 5, 5);
  const Matrix d = random_matrix(4, 5, 6);
  const Matrix w = synthesize(base, DenseDelta{d});
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_EQ(w[i], base[i] + d[i]);
}

TEST(Synthesize, ShapeMismatch) {
  EXPECT_THROW(synthesize(Matrix(2, 2), DenseDelta{Matrix(3, 2)}), DimensionError);
  EXPECT_THROW(synthesize(Matrix(2, 2), SparseDelta{2, 3, {}, {}, 1.0}), DimensionError);
}

TEST(Materialize, SparseHandPlacement) {
  EXPECT_EQ(materialize(SparseDelta{2, 2, {0, 3}, {2, 5}, 1.0}), Matrix::from_rows({{2, 0}, {0, 5}}));
}

TEST(Materialize, LowRankOuterProduct) {
  EXPECT_EQ(materialize(LowRankDelta{Matrix::from_rows({{1}, {2}}), Matrix::from_rows({{3, 4}})}),
            Matrix::from_rows({{3, 4}, {6, 8}}));
}

TEST(Materialize, InvalidSparseIsCorruption) {
  EXPECT_THROW(materialize(SparseDelta{2, 2, {3, 1}, {1, 1}, 1.0}), CorruptionError);
  EXPECT_THROW(materialize(SparseDelta{2, 2, {4}, {1}, 1.0}), CorruptionError);
  EXPECT_THROW(materialize(SparseDelta{2, 2, {0}, {1, 2}, 1.0}), CorruptionError);
}

TEST(Sparsify, ZeroRateKeepsEverything) {
  RngStream rng(1, 1);
  const Matrix d = random_matrix(6, 7, 1);
  const SparseDelta s = sparsify(DenseDelta{d}, 0.0, rng);
  EXPECT_EQ(s.index.size(), d.size());
  EXPECT_EQ(s.rescale(), 1.0);
  EXPECT_EQ(materialize(s), d);
}

TEST(Sparsify, ZeroDeltaStaysZero) {
  RngStream rng(1, 1);
  EXPECT_EQ(materialize(sparsify(DenseDelta{Matrix(5, 5)}, 0.7, rng)), Matrix(5, 5));
}

TEST(Sparsify, RateOneRejected) {
  RngStream rng(1, 1);
  EXPECT_THROW(sparsify(DenseDelta{Matrix(2, 2)}, 1.0, rng), ParameterError);
}

TEST(Sparsify, MatchesDenseMaskOracleExactly) {
  for (double p : {0.3, 0.9}) {
    const Matrix d = random_matrix(10, 12, 11);
    RngStream a(5, 77), b(5, 77);
    const SparseDelta s = sparsify(DenseDelta{d}, p, a);
    const Matrix mask = bernoulli_mask(p, 10, 12, b);
    Matrix oracle(10, 12);
    for (std::size_t i = 0; i < d.size(); ++i) oracle[i] = (1.0 - mask[i]) * d[i] / (1.0 - p);
    EXPECT_EQ(materialize(s), oracle);
    EXPECT_DOUBLE_EQ(s.rescale(), 1.0 / (1.0 - p));
  }
}

TEST(Sparsify, ExactCountKeepsRoundedCount) {
  RngStream rng(2, 2);
  const SparseDelta s = sparsify(DenseDelta{random_matrix(10, 10, 3)}, 0.87, rng, MaskMode::exact_count);
  EXPECT_EQ(s.index.size(), 13u);
}

TEST(Sparsify, UnbiasedOverManyMasks) {
  const Matrix d = random_matrix(50, 50, 21);
  for (double p : {0.5, 0.9}) {
    Matrix acc(50, 50);
    const int n = 4000;
    for (int s = 0; s < n; ++s) {
      RngStream rng(static_cast<std::uint64_t>(s), 1);
      add_inplace(acc, materialize(sparsify(DenseDelta{d}, p, rng)));
    }
    // Monte Carlo error shrinks as sqrt(p/((1-p) n)).
    EXPECT_LT(rel_frob(scaled(acc, 1.0 / n), d), 3.0 * std::sqrt(p / ((1 - p) * n)));
  }
}

TEST(Quantize, AllZero) {
  for (unsigned k : kSupportedBitWidths) {
    const QuantizedDelta q = quantize(DenseDelta{Matrix(3, 3)}, k);
    EXPECT_EQ(q.scale, 0.0);
    EXPECT_EQ(dequantize(q), Matrix(3, 3));
  }
}

TEST(Quantize, OneBitSignTimesMeanAbs) {
  const QuantizedDelta q = quantize(DenseDelta{Matrix::from_rows({{0.1, -0.2, 0.3}})}, 1);
  EXPECT_NEAR(q.scale, 0.2, 1e-15);
  const Matrix m = dequantize(q);
  EXPECT_NEAR(m[0], 0.2, 1e-15);
  EXPECT_NEAR(m[1], -0.2, 1e-15);
  EXPECT_NEAR(m[2], 0.2, 1e-15);
}

TEST(Quantize, SixteenBitNearLossless) {
  const Matrix d = random_matrix(20, 30, 5);
  EXPECT_LT(rel_frob(dequantize(quantize(DenseDelta{d}, 16)), d), 1e-3);
}

TEST(Quantize, ErrorBoundedByHalfStep) {
  const Matrix d = random_matrix(20, 30, 6);
  for (unsigned k : {2u, 4u, 8u, 16u}) {
    const QuantizedDelta q = quantize(DenseDelta{d}, k);
    EXPECT_DOUBLE_EQ(q.scale, max_abs(d) / ((1 << (k - 1)) - 1));
    EXPECT_LE(max_abs(subtract(dequantize(q), d)), q.scale / 2 * (1 + 1e-12));
  }
}

TEST(Quantize, ErrorMonotoneInBitWidth) {
  const Matrix d = random_matrix(20, 30, 7);
  double prev = INFINITY;
  for (unsigned k : {2u, 4u, 8u, 16u}) {
    const double e = frobenius_norm(subtract(dequantize(quantize(DenseDelta{d}, k)), d));
    EXPECT_LE(e, prev);
    prev = e;
  }
}

TEST(Quantize, UnsupportedWidth) {
  EXPECT_THROW(quantize(DenseDelta{Matrix(2, 2)}, 3), ParameterError);
  EXPECT_THROW(quantize(DenseDelta{Matrix(2, 2)}, 0), ParameterError);
}

TEST(Codes, PackUnpackRoundTrip) {
  RngStream rng(3, 3);
  for (unsigned k : {2u, 4u, 8u, 16u}) {
    const std::int32_t hi = (1 << (k - 1)) - 1;
    std::vector<std::int32_t> codes(37);
    for (auto& c : codes) c = static_cast<std::int32_t>(rng.below(2 * hi + 1)) - hi;
    const auto packed = pack_codes(codes, k);
    EXPECT_EQ(packed.size(), packed_bytes(codes.size(), k));
    EXPECT_EQ(unpack_codes(packed, codes.size(), k), codes);
  }
  const std::vector<std::int32_t> signs{1, -1, -1, 1, 1, 1, -1, 1, -1};
  EXPECT_EQ(unpack_codes(pack_codes(signs, 1), signs.size(), 1), signs);
}

TEST(Codes, LittleEndianLsbFirstLayout) {
  // Two 4-bit codes 1 and -1 -> low nibble 0x1, high nibble 0xF.
  EXPECT_EQ(pack_codes({1, -1}, 4), (std::vector<std::uint8_t>{0xF1}));
  // 16-bit code -2 -> 0xFFFE stored low byte first.
  EXPECT_EQ(pack_codes({-2}, 16), (std::vector<std::uint8_t>{0xFE, 0xFF}));
  // Sign bits: +1 -> 1, -1 -> 0, first code in bit 0.
  EXPECT_EQ(pack_codes({1, -1, 1}, 1), (std::vector<std::uint8_t>{0x05}));
}

TEST(InitSparseTrainable, ZeroRateCoversEverything) {
  RngStream rng(1, 1);
  const SparseDelta s = init_sparse_trainable(3, 4, 0.0, rng);
  EXPECT_EQ(s.index.size(), 12u);
  EXPECT_EQ(s.value, std::vector<double>(12, 0.0));
  EXPECT_EQ(s.rescale(), 1.0);
}

TEST(InitSparseTrainable, SynthesisIsBaseAtInit) {
  RngStream rng(1, 1);
  const Matrix base = random_matrix(6, 6, 1);
  EXPECT_EQ(synthesize(base, init_sparse_trainable(6, 6, 0.8, rng)), base);
}

TEST(InitSparseTrainable, CountingOracle) {
  RngStream rng(4, 4);
  const SparseDelta s = init_sparse_trainable(4, 4, 0.75, rng);
  EXPECT_EQ(s.index.size(), 4u);
  EXPECT_EQ(std::set<std::uint32_t>(s.index.begin(), s.index.end()).size(), 4u);
}

TEST(InitSparseTrainable, DegenerateKeepCountRejected) {
  RngStream rng(1, 1);
  EXPECT_THROW(init_sparse_trainable(2, 2, 0.9, rng), ParameterError);
  EXPECT_THROW(init_sparse_trainable(2, 2, 1.0, rng), ParameterError);
}

TEST(InitLowRankTrainable, SynthesisIsBaseAtInit) {
  RngStream rng(1, 1);
  const Matrix base = random_matrix(5, 7, 1);
  const LowRankDelta l = init_lowrank_trainable(5, 7, 3, rng);
  EXPECT_EQ(synthesize(base, l), base);
  EXPECT_LE(max_abs(l.a), 1.0 / std::sqrt(5.0));
  EXPECT_GT(max_abs(l.a), 0.0);
}

TEST(InitLowRankTrainable, RankBoundary) {
  RngStream rng(1, 1);
  EXPECT_NO_THROW(init_lowrank_trainable(5, 7, 5, rng));
  EXPECT_THROW(init_lowrank_trainable(5, 7, 6, rng), ParameterError);
  EXPECT_THROW(init_lowrank_trainable(5, 7, 0, rng), ParameterError);
}

TEST(InitLowRankTrainable, Reproducible) {
  RngStream a(9, 9), b(9, 9);
  EXPECT_EQ(init_lowrank_trainable(6, 6, 2, a), init_lowrank_trainable(6, 6, 2, b));
}
