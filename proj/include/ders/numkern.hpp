// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense kernels, seeded randomness and the global storage dtype.
//
// Everything here is deterministic: matmul accumulates in row-major order
// (k innermost per output element), and RngStream derives its engine state
// only from (seed, stream_id).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "ders/errors.hpp"

namespace ders {

using RowVector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(rows, cols));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged initializer for matrix");
      std::size_t j = 0;
      for (double v : row) m(i, j++) = v;
      ++i;
    }
    return m;
  }

  static Matrix row_vector(std::span<const double> v) {
    return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
  }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::string shape() const { return shape_string(rows_, cols_); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  double& operator[](std::size_t flat) noexcept { return data_[flat]; }
  double operator[](std::size_t flat) const noexcept { return data_[flat]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  // Bitwise-by-value equality (NaN never appears in valid matrices).
  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Storage dtype. Arithmetic and checkpoint tensors are always 64-bit; the
// dtype sets the default original bit width K used by parameter accounting
// and is recorded in checkpoint headers.

enum class Dtype : std::uint8_t { f64 = 0, f32 = 1 };

inline Dtype& default_dtype_slot() noexcept {
  static Dtype dtype = Dtype::f64;
  return dtype;
}
inline Dtype default_dtype() noexcept { return default_dtype_slot(); }
inline void set_default_dtype(Dtype d) noexcept { default_dtype_slot() = d; }
inline unsigned dtype_bits(Dtype d) noexcept { return d == Dtype::f64 ? 64u : 32u; }
inline const char* dtype_name(Dtype d) noexcept { return d == Dtype::f64 ? "f64" : "f32"; }

/// Rounds every entry to the precision of `d` (no-op for f64).
inline void round_to_dtype(Matrix& m, Dtype d) noexcept {
  if (d == Dtype::f64) return;
  for (double& v : m.data()) v = static_cast<double>(static_cast<float>(v));
}

// ---------------------------------------------------------------------------
// Randomness

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Order-sensitive combination of stream-id components, e.g. (layer, matrix, expert).
inline constexpr std::uint64_t stream_id(std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = 0x51ed270b27d1f3a5ULL;
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p + 0x2545f4914f6cdd1dULL));
  return h;
}

/// Deterministic random stream keyed by (seed, stream_id). The engine is
/// std::mt19937_64, whose output sequence is fixed by the standard; all
/// conversions to doubles and bounded integers are done here rather than
/// through <random> distributions, which are implementation-defined.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream)
      : seed_(seed), stream_(stream), engine_(splitmix64(seed ^ splitmix64(stream))) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) by rejection; n > 0.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller. Relies on libm log/cos/sqrt.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Kernels

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + a.shape() + " x " + b.shape());
  }
  Matrix c(a.rows(), b.cols());
  const std::size_t n = a.cols();
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* crow = &c(i, 0);
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a(i, k);
      const double* brow = b.data().data() + k * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

/// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + a.shape() + "^T x " + b.shape());
  }
  Matrix c(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ari = a(r, i);
      if (ari == 0.0) continue;
      double* crow = &c(i, 0);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += ari * b(r, j);
    }
  }
  return c;
}

/// a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + a.shape() + " x " + b.shape() + "^T");
  }
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
      c(i, j) = s;
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape " + a.shape() + " vs " + b.shape());
  }
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

inline void add_inplace(Matrix& acc, const Matrix& b, double alpha = 1.0) {
  require_same_shape(acc, b, "add_inplace");
  if (alpha == 1.0) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += b[i];
  } else {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += alpha * b[i];
  }
}

inline Matrix scaled(const Matrix& a, double s) {
  Matrix c = a;
  for (double& v : c.data()) v *= s;
  return c;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: length " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double frobenius_norm(const Matrix& a) { return std::sqrt(dot(a.data(), a.data())); }

inline double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

inline Matrix uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi,
                             RngStream& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.uniform(lo, hi);
  return m;
}

/// Numerically stable softmax (max subtraction).
inline RowVector softmax(std::span<const double> v) {
  if (v.empty()) throw DimensionError("softmax: empty vector");
  const double mx = *std::max_element(v.begin(), v.end());
  RowVector out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

/// Indices of the `k` largest entries, ties broken by lowest index, returned
/// in ascending index order.
inline std::vector<std::size_t> topk_indices(std::span<const double> v, std::size_t k) {
  if (k < 1 || k > v.size()) {
    throw ParameterError("topk: count " + std::to_string(k) + " outside [1, " +
                         std::to_string(v.size()) + "]");
  }
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

/// Zeroes every entry outside the top-k (no renormalisation).
inline RowVector topk_mask(std::span<const double> v, std::size_t k) {
  RowVector out(v.size(), 0.0);
  for (std::size_t i : topk_indices(v, k)) out[i] = v[i];
  return out;
}

inline void require_probability(double p, const char* what) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw ParameterError(std::string(what) + ": probability " + std::to_string(p) +
                         " outside [0, 1]");
  }
}

/// Entries are 1 with probability p, independently.
inline Matrix bernoulli_mask(double p, std::size_t rows, std::size_t cols, RngStream& rng) {
  require_probability(p, "bernoulli_mask");
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.uniform() < p ? 1.0 : 0.0;
  return m;
}

/// `keep` distinct values from [0, total), ascending (Floyd's algorithm).
inline std::vector<std::uint32_t> sample_unique_indices(std::uint64_t total, std::uint64_t keep,
                                                        RngStream& rng) {
  if (keep > total) {
    throw ParameterError("sample_unique_indices: keep " + std::to_string(keep) + " > total " +
                         std::to_string(total));
  }
  if (total > std::numeric_limits<std::uint32_t>::max()) {
    throw ParameterError("sample_unique_indices: total exceeds u32 index range");
  }
  std::vector<char> taken(total, 0);
  for (std::uint64_t j = total - keep; j < total; ++j) {
    const std::uint64_t t = rng.below(j + 1);
    taken[taken[t] ? j : t] = 1;
  }
  std::vector<std::uint32_t> out;
  out.reserve(keep);
  for (std::uint64_t i = 0; i < total; ++i)
    if (taken[i]) out.push_back(static_cast<std::uint32_t>(i));
  return out;
}

// ---------------------------------------------------------------------------
// Threading. Work is split into chunks whose boundaries do not depend on the
// thread count, so reductions over chunks stay bit-identical.

inline unsigned thread_cap() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DERS_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return static_cast<unsigned>(std::min<long>(v, 256));
  }
  return hw;
}

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const unsigned threads = static_cast<unsigned>(std::min<std::size_t>(thread_cap(), n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace ders
