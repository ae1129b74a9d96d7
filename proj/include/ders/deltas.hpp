// SPDX-License-Identifier: Apache-2.0
#pragma once

// Expert-specific delta weights and the decompose / replace / synthesize
// primitives: W_i = W_base + delta_i, with delta_i stored densely, as a
// sparse index/value pair, as a low-rank product, or as bit-packed codes.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ders/numkern.hpp"

namespace ders {

struct DenseDelta {
  Matrix mat;
  bool operator==(const DenseDelta&) const = default;
};

/// Compact sparse delta. `index` holds flat row-major positions (strictly
/// increasing), `value` the raw stored entries. Materialised entries are
/// value / keep_fraction: keep_fraction is 1 - p for deltas produced by
/// sparsification and 1.0 for trainable deltas.
struct SparseDelta {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint32_t> index;
  std::vector<double> value;
  double keep_fraction = 1.0;

  double rescale() const noexcept { return 1.0 / keep_fraction; }
  bool operator==(const SparseDelta&) const = default;
};

struct LowRankDelta {
  Matrix a;  // rows x rank
  Matrix b;  // rank x cols
  std::size_t rank() const noexcept { return a.cols(); }
  bool operator==(const LowRankDelta&) const = default;
};

/// Per-matrix quantised delta. Codes are k-bit two's complement for k >= 2
/// and a sign bit (1 -> +1, 0 -> -1) for k == 1, packed LSB-first.
struct QuantizedDelta {
  std::size_t rows = 0;
  std::size_t cols = 0;
  unsigned bit_width = 8;
  std::vector<std::uint8_t> packed;
  double scale = 0.0;
  bool operator==(const QuantizedDelta&) const = default;
};

using DeltaWeight = std::variant<DenseDelta, SparseDelta, LowRankDelta, QuantizedDelta>;

enum class DeltaEncoding : std::uint8_t { dense = 0, sparse = 1, lowrank = 2, quantized = 3 };

inline DeltaEncoding encoding_of(const DeltaWeight& d) noexcept {
  return static_cast<DeltaEncoding>(d.index());
}

inline const char* encoding_name(DeltaEncoding e) noexcept {
  switch (e) {
    case DeltaEncoding::dense: return "dense";
    case DeltaEncoding::sparse: return "sparse";
    case DeltaEncoding::lowrank: return "lowrank";
    case DeltaEncoding::quantized: return "quantized";
  }
  return "?";
}

/// One shared base weight plus per-member deltas.
struct ExpertGroup {
  Matrix base;
  std::vector<DeltaWeight> deltas;
  bool operator==(const ExpertGroup&) const = default;
};

inline constexpr std::array<unsigned, 5> kSupportedBitWidths{1, 2, 4, 8, 16};

inline bool supported_bit_width(unsigned k) noexcept {
  for (unsigned w : kSupportedBitWidths)
    if (w == k) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Bit packing

inline std::size_t packed_bytes(std::size_t count, unsigned bits) noexcept {
  return (count * bits + 7) / 8;
}

inline std::vector<std::uint8_t> pack_codes(const std::vector<std::int32_t>& codes, unsigned bits) {
  std::vector<std::uint8_t> out(packed_bytes(codes.size(), bits), 0);
  const std::uint32_t mask = bits == 32 ? 0xffffffffu : ((1u << bits) - 1u);
  std::size_t bitpos = 0;
  for (std::int32_t code : codes) {
    // 1-bit codes are signs: +1 -> 1, -1 -> 0.
    std::uint32_t u = bits == 1 ? (code > 0 ? 1u : 0u) : static_cast<std::uint32_t>(code) & mask;
    for (unsigned b = 0; b < bits; ++b, ++bitpos) {
      if (u & (1u << b)) out[bitpos >> 3] |= static_cast<std::uint8_t>(1u << (bitpos & 7));
    }
  }
  return out;
}

inline std::vector<std::int32_t> unpack_codes(const std::vector<std::uint8_t>& packed,
                                              std::size_t count, unsigned bits) {
  if (packed.size() != packed_bytes(count, bits)) {
    throw CorruptionError("packed code array has " + std::to_string(packed.size()) +
                          " bytes, expected " + std::to_string(packed_bytes(count, bits)));
  }
  std::vector<std::int32_t> out(count);
  std::size_t bitpos = 0;
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    for (unsigned b = 0; b < bits; ++b, ++bitpos) {
      if (packed[bitpos >> 3] & (1u << (bitpos & 7))) u |= (1u << b);
    }
    if (bits == 1) {
      out[i] = u ? 1 : -1;
    } else {
      const std::uint32_t sign = 1u << (bits - 1);
      out[i] = (u & sign) ? static_cast<std::int32_t>(u) - static_cast<std::int32_t>(1u << bits)
                          : static_cast<std::int32_t>(u);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural queries

inline std::pair<std::size_t, std::size_t> delta_shape(const DeltaWeight& d) {
  return std::visit(
      [](const auto& x) -> std::pair<std::size_t, std::size_t> {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, DenseDelta>) return {x.mat.rows(), x.mat.cols()};
        else if constexpr (std::is_same_v<T, LowRankDelta>) return {x.a.rows(), x.b.cols()};
        else return {x.rows, x.cols};
      },
      d);
}

/// Throws CorruptionError when a delta breaks its representation invariants.
inline void validate_delta(const DeltaWeight& d) {
  std::visit(
      [](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, SparseDelta>) {
          const std::uint64_t n = static_cast<std::uint64_t>(x.rows) * x.cols;
          if (x.index.size() != x.value.size())
            throw CorruptionError("sparse delta: index/value length mismatch");
          for (std::size_t j = 0; j < x.index.size(); ++j) {
            if (x.index[j] >= n) throw CorruptionError("sparse delta: index out of range");
            if (j > 0 && x.index[j] <= x.index[j - 1])
              throw CorruptionError("sparse delta: index not strictly increasing");
          }
          if (!(x.keep_fraction > 0.0 && x.keep_fraction <= 1.0))
            throw CorruptionError("sparse delta: keep fraction outside (0, 1]");
        } else if constexpr (std::is_same_v<T, LowRankDelta>) {
          if (x.a.cols() != x.b.rows() || x.a.cols() == 0)
            throw CorruptionError("low-rank delta: factor shapes " + x.a.shape() + " and " +
                                  x.b.shape() + " are inconsistent");
        } else if constexpr (std::is_same_v<T, QuantizedDelta>) {
          if (!supported_bit_width(x.bit_width))
            throw CorruptionError("quantized delta: unsupported bit width " +
                                  std::to_string(x.bit_width));
          if (x.packed.size() != packed_bytes(x.rows * x.cols, x.bit_width))
            throw CorruptionError("quantized delta: packed length mismatch");
          if (!(x.scale >= 0.0) || !std::isfinite(x.scale))
            throw CorruptionError("quantized delta: invalid scale");
        }
      },
      d);
}

// ---------------------------------------------------------------------------
// Decompose / materialise / synthesise

inline DenseDelta decompose(const Matrix& base, const Matrix& trained) {
  require_same_shape(base, trained, "decompose");
  return DenseDelta{subtract(trained, base)};
}

inline Matrix dequantize(const QuantizedDelta& q) {
  Matrix m(q.rows, q.cols);
  if (q.scale == 0.0) return m;
  const auto codes = unpack_codes(q.packed, q.rows * q.cols, q.bit_width);
  for (std::size_t i = 0; i < codes.size(); ++i) m[i] = codes[i] * q.scale;
  return m;
}

inline Matrix materialize(const DeltaWeight& delta) {
  validate_delta(delta);
  return std::visit(
      [](const auto& x) -> Matrix {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, DenseDelta>) {
          return x.mat;
        } else if constexpr (std::is_same_v<T, SparseDelta>) {
          Matrix m(x.rows, x.cols);
          for (std::size_t j = 0; j < x.index.size(); ++j) m[x.index[j]] = x.value[j] / x.keep_fraction;
          return m;
        } else if constexpr (std::is_same_v<T, LowRankDelta>) {
          return matmul(x.a, x.b);
        } else {
          return dequantize(x);
        }
      },
      delta);
}

inline Matrix synthesize(const Matrix& base, const DeltaWeight& delta) {
  const auto [r, c] = delta_shape(delta);
  if (r != base.rows() || c != base.cols()) {
    throw DimensionError("synthesize: base " + base.shape() + " vs delta " +
                         Matrix::shape_string(r, c));
  }
  // Sparse deltas touch only their indices; avoid a dense temporary.
  if (const auto* s = std::get_if<SparseDelta>(&delta)) {
    validate_delta(delta);
    Matrix w = base;
    for (std::size_t j = 0; j < s->index.size(); ++j) w[s->index[j]] += s->value[j] / s->keep_fraction;
    return w;
  }
  return add(base, materialize(delta));
}

// ---------------------------------------------------------------------------
// Post-training replacement

inline std::size_t kept_count(std::size_t total, double drop_rate) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(total) * (1.0 - drop_rate)));
}

enum class MaskMode : std::uint8_t {
  bernoulli,    // each entry dropped independently with probability p
  exact_count,  // a uniformly random subset of round(n(1-p)) entries is kept
};

inline SparseDelta sparsify(const DenseDelta& delta, double drop_rate, RngStream& rng,
                            MaskMode mode = MaskMode::bernoulli) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
    throw ParameterError("sparsify: drop rate " + std::to_string(drop_rate) + " outside [0, 1)");
  }
  const Matrix& m = delta.mat;
  SparseDelta out;
  out.rows = m.rows();
  out.cols = m.cols();
  out.keep_fraction = 1.0 - drop_rate;
  if (mode == MaskMode::bernoulli) {
    const Matrix mask = bernoulli_mask(drop_rate, m.rows(), m.cols(), rng);
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (mask[i] == 0.0) {
        out.index.push_back(static_cast<std::uint32_t>(i));
        out.value.push_back(m[i]);
      }
    }
  } else {
    out.index = sample_unique_indices(m.size(), kept_count(m.size(), drop_rate), rng);
    out.value.reserve(out.index.size());
    for (std::uint32_t i : out.index) out.value.push_back(m[i]);
  }
  return out;
}

inline QuantizedDelta quantize(const DenseDelta& delta, unsigned bit_width) {
  if (!supported_bit_width(bit_width)) {
    throw ParameterError("quantize: unsupported bit width " + std::to_string(bit_width) +
                         " (expected 1, 2, 4, 8 or 16)");
  }
  const Matrix& m = delta.mat;
  QuantizedDelta q;
  q.rows = m.rows();
  q.cols = m.cols();
  q.bit_width = bit_width;
  std::vector<std::int32_t> codes(m.size(), bit_width == 1 ? 1 : 0);
  if (bit_width == 1) {
    double sum = 0.0;
    for (double v : m.data()) sum += std::abs(v);
    q.scale = m.empty() ? 0.0 : sum / static_cast<double>(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) codes[i] = m[i] < 0.0 ? -1 : 1;
  } else {
    const double qmax = static_cast<double>((1 << (bit_width - 1)) - 1);
    const double absmax = max_abs(m);
    q.scale = absmax / qmax;
    if (q.scale > 0.0) {
      for (std::size_t i = 0; i < m.size(); ++i) {
        const double c = std::clamp(std::round(m[i] / q.scale), -qmax, qmax);
        codes[i] = static_cast<std::int32_t>(c);
      }
    }
  }
  q.packed = pack_codes(codes, bit_width);
  return q;
}

// ---------------------------------------------------------------------------
// Trainable deltas for upcycling (zero at initialisation)

inline SparseDelta init_sparse_trainable(std::size_t rows, std::size_t cols, double sparse_rate,
                                         RngStream& rng) {
  if (!(sparse_rate >= 0.0 && sparse_rate < 1.0)) {
    throw ParameterError("init_sparse_trainable: sparse rate " + std::to_string(sparse_rate) +
                         " outside [0, 1)");
  }
  const std::size_t keep = kept_count(rows * cols, sparse_rate);
  if (keep == 0) {
    throw ParameterError("init_sparse_trainable: sparse rate " + std::to_string(sparse_rate) +
                         " keeps no entries of a " + Matrix::shape_string(rows, cols) + " delta");
  }
  SparseDelta s;
  s.rows = rows;
  s.cols = cols;
  s.index = sample_unique_indices(rows * cols, keep, rng);
  s.value.assign(keep, 0.0);
  s.keep_fraction = 1.0;
  return s;
}

inline double default_lowrank_init_scale(std::size_t rows) {
  return 1.0 / std::sqrt(static_cast<double>(rows));
}

inline LowRankDelta init_lowrank_trainable(std::size_t rows, std::size_t cols, std::size_t rank,
                                           RngStream& rng, double init_scale) {
  if (rank < 1 || rank > std::min(rows, cols)) {
    throw ParameterError("init_lowrank_trainable: rank " + std::to_string(rank) +
                         " outside [1, " + std::to_string(std::min(rows, cols)) + "]");
  }
  LowRankDelta d;
  d.a = uniform_matrix(rows, rank, -init_scale, init_scale, rng);
  d.b = Matrix(rank, cols);
  return d;
}

inline LowRankDelta init_lowrank_trainable(std::size_t rows, std::size_t cols, std::size_t rank,
                                           RngStream& rng) {
  return init_lowrank_trainable(rows, cols, rank, rng, default_lowrank_init_scale(rows));
}

}  // namespace ders
