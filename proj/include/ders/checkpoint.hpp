// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary checkpoint format (little-endian, fixed width).
//
//   offset  size  field
//   0       4     magic "DERS"
//   4       4     u32 format version
//   8       4     u32 dtype tag (0 = f64, 1 = f32; accounting width)
//   12      4     u32 section count S
//   16      8     u64 payload size
//   24      4     u32 CRC-32 of the payload
//   28      4     u32 CRC-32 of bytes [0, 28) and the section table
//   32      48*S  section table: char name[32] (NUL padded), u64 offset, u64 size
//   ...           payload (section offsets are relative to its start)
//
// Sections: "topology", "seeds", "embed", "block.<b>" per block, "readout".
// Matrices are u64 rows, u64 cols, rows*cols f64. Delta records start with
// a u8 encoding tag (dense 0, sparse 1, lowrank 2, quantized 3):
//   dense     matrix
//   sparse    u64 rows, u64 cols, f64 keep_fraction, u64 n, u32 index[n], f64 value[n]
//   lowrank   matrix a, matrix b
//   quantized u64 rows, u64 cols, u8 bit_width, f64 scale, u64 n, u8 codes[n]
// Vanilla-upcycled layers store the upcycle-time FFN weights as the group
// base (the init-base record consumed by compression).

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "ders/deltas.hpp"
#include "ders/moe.hpp"

namespace ders {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kHeaderBytes = 32;
inline constexpr std::size_t kSectionNameBytes = 32;
inline constexpr std::size_t kSectionEntryBytes = kSectionNameBytes + 16;

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class ByteWriter {
 public:
  template <typename T>
    requires std::is_integral_v<T>
  void put(T v) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      buf_.push_back(static_cast<std::uint8_t>(u & 0xFFu));
      if constexpr (sizeof(T) > 1) u = static_cast<U>(u >> 8);
    }
  }
  void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void put_bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void put_matrix(const Matrix& m) {
    put<std::uint64_t>(m.rows());
    put<std::uint64_t>(m.cols());
    for (double v : m.data()) put_f64(v);
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string context)
      : data_(data), ctx_(std::move(context)) {}

  template <typename T>
    requires std::is_integral_v<T>
  T get() {
    need(sizeof(T));
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::span<const std::uint8_t> get_bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    auto b = get_bytes(n);
    return std::string(b.begin(), b.end());
  }
  std::size_t get_count(std::size_t elem_bytes) {
    const auto n = get<std::uint64_t>();
    if (elem_bytes > 0 && n > remaining() / elem_bytes)
      throw CorruptionError(ctx_ + ": declared length " + std::to_string(n) + " exceeds section");
    return static_cast<std::size_t>(n);
  }
  Matrix get_matrix() {
    const auto r = get<std::uint64_t>();
    const auto c = get<std::uint64_t>();
    if (c != 0 && r > remaining() / 8 / c)
      throw CorruptionError(ctx_ + ": matrix " + std::to_string(r) + "x" + std::to_string(c) +
                            " exceeds section");
    Matrix m(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    for (double& v : m.data()) v = get_f64();
    return m;
  }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  void expect_end() const {
    if (pos_ != data_.size()) throw CorruptionError(ctx_ + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (n > data_.size() - pos_) throw CorruptionError(ctx_ + ": truncated record");
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string ctx_;
};

namespace detail {

inline void write_delta(ByteWriter& w, const DeltaWeight& d) {
  w.put<std::uint8_t>(static_cast<std::uint8_t>(encoding_of(d)));
  std::visit(
      [&](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, DenseDelta>) {
          w.put_matrix(x.mat);
        } else if constexpr (std::is_same_v<T, SparseDelta>) {
          w.put<std::uint64_t>(x.rows);
          w.put<std::uint64_t>(x.cols);
          w.put_f64(x.keep_fraction);
          w.put<std::uint64_t>(x.index.size());
          for (auto i : x.index) w.put<std::uint32_t>(i);
          for (double v : x.value) w.put_f64(v);
        } else if constexpr (std::is_same_v<T, LowRankDelta>) {
          w.put_matrix(x.a);
          w.put_matrix(x.b);
        } else {
          w.put<std::uint64_t>(x.rows);
          w.put<std::uint64_t>(x.cols);
          w.put<std::uint8_t>(static_cast<std::uint8_t>(x.bit_width));
          w.put_f64(x.scale);
          w.put<std::uint64_t>(x.packed.size());
          w.put_bytes(x.packed);
        }
      },
      d);
}

inline DeltaWeight read_delta(ByteReader& r) {
  const auto tag = r.get<std::uint8_t>();
  DeltaWeight out;
  switch (tag) {
    case 0: out = DenseDelta{r.get_matrix()}; break;
    case 1: {
      SparseDelta s;
      s.rows = r.get<std::uint64_t>();
      s.cols = r.get<std::uint64_t>();
      s.keep_fraction = r.get_f64();
      const std::size_t n = r.get_count(12);
      s.index.resize(n);
      s.value.resize(n);
      for (auto& i : s.index) i = r.get<std::uint32_t>();
      for (auto& v : s.value) v = r.get_f64();
      out = std::move(s);
      break;
    }
    case 2: {
      LowRankDelta l;
      l.a = r.get_matrix();
      l.b = r.get_matrix();
      out = std::move(l);
      break;
    }
    case 3: {
      QuantizedDelta q;
      q.rows = r.get<std::uint64_t>();
      q.cols = r.get<std::uint64_t>();
      q.bit_width = r.get<std::uint8_t>();
      q.scale = r.get_f64();
      const std::size_t n = r.get_count(1);
      auto b = r.get_bytes(n);
      q.packed.assign(b.begin(), b.end());
      out = std::move(q);
      break;
    }
    default:
      throw CorruptionError("unknown delta encoding tag " + std::to_string(tag));
  }
  validate_delta(out);
  return out;
}

inline void write_group(ByteWriter& w, const ExpertGroup& g) {
  w.put_matrix(g.base);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.deltas.size()));
  for (const auto& d : g.deltas) write_delta(w, d);
}

inline ExpertGroup read_group(ByteReader& r) {
  ExpertGroup g;
  g.base = r.get_matrix();
  const auto n = r.get<std::uint32_t>();
  if (n > r.remaining()) throw CorruptionError("expert group: implausible delta count");
  for (std::uint32_t i = 0; i < n; ++i) g.deltas.push_back(read_delta(r));
  return g;
}

template <typename E>
E checked_enum(std::uint8_t v, std::uint8_t max, const char* what) {
  if (v > max) throw CorruptionError(std::string("invalid ") + what + " tag " + std::to_string(v));
  return static_cast<E>(v);
}

inline void write_ffn(ByteWriter& w, const FFN& f) {
  w.put<std::uint8_t>(static_cast<std::uint8_t>(f.activation));
  w.put_matrix(f.w_in);
  w.put_matrix(f.w_out);
}

inline FFN read_ffn(ByteReader& r) {
  FFN f;
  f.activation = checked_enum<Activation>(r.get<std::uint8_t>(), 2, "activation");
  f.w_in = r.get_matrix();
  f.w_out = r.get_matrix();
  return f;
}

inline std::vector<std::uint8_t> block_section(const Block& block) {
  ByteWriter w;
  if (const auto* f = std::get_if<FFN>(&block)) {
    w.put<std::uint8_t>(0);
    write_ffn(w, *f);
    return std::move(w.bytes());
  }
  const auto& l = std::get<MoELayer>(block);
  w.put<std::uint8_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(l.n_experts));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(l.router.topk_count));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(l.activation));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(l.origin));
  w.put<std::uint8_t>(l.extended ? 1 : 0);
  w.put<std::uint8_t>(l.shared_trainable ? 1 : 0);
  w.put<std::uint8_t>(l.universal ? 1 : 0);
  w.put_matrix(l.router.w_r);
  write_group(w, l.w_in);
  write_group(w, l.w_out);
  if (l.universal) write_ffn(w, *l.universal);
  return std::move(w.bytes());
}

inline Block read_block(ByteReader& r) {
  const auto kind = r.get<std::uint8_t>();
  if (kind == 0) return read_ffn(r);
  if (kind != 1) throw CorruptionError("invalid block kind " + std::to_string(kind));
  MoELayer l;
  l.n_experts = r.get<std::uint32_t>();
  l.router.topk_count = r.get<std::uint32_t>();
  l.activation = checked_enum<Activation>(r.get<std::uint8_t>(), 2, "activation");
  l.origin = checked_enum<LayerOrigin>(r.get<std::uint8_t>(), 3, "layer origin");
  l.extended = r.get<std::uint8_t>() != 0;
  l.shared_trainable = r.get<std::uint8_t>() != 0;
  const bool has_universal = r.get<std::uint8_t>() != 0;
  l.router.w_r = r.get_matrix();
  l.w_in = read_group(r);
  l.w_out = read_group(r);
  if (has_universal) l.universal = read_ffn(r);
  try {
    validate_layer(l);
  } catch (const Error& e) {
    throw CorruptionError(std::string("inconsistent MoE layer: ") + e.what());
  }
  return l;
}

struct Section {
  std::string name;
  std::vector<std::uint8_t> bytes;
};

inline std::vector<Section> model_sections(const Model& m) {
  std::vector<Section> s;
  {
    ByteWriter w;
    w.put<std::uint64_t>(m.input_dim);
    w.put<std::uint64_t>(m.output_dim);
    w.put<std::uint64_t>(m.d);
    w.put<std::uint64_t>(m.d_h);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(m.activation));
    w.put<std::uint8_t>(m.embed ? 1 : 0);
    w.put<std::uint64_t>(m.blocks.size());
    w.put<std::uint64_t>(m.ancestor_params);
    s.push_back({"topology", std::move(w.bytes())});
  }
  {
    ByteWriter w;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(m.seeds.size()));
    for (const auto& [k, v] : m.seeds) {
      w.put_string(k);
      w.put<std::uint64_t>(v);
    }
    s.push_back({"seeds", std::move(w.bytes())});
  }
  if (m.embed) {
    ByteWriter w;
    w.put_matrix(*m.embed);
    s.push_back({"embed", std::move(w.bytes())});
  }
  for (std::size_t b = 0; b < m.blocks.size(); ++b)
    s.push_back({"block." + std::to_string(b), block_section(m.blocks[b])});
  {
    ByteWriter w;
    w.put_matrix(m.readout);
    w.put_matrix(m.readout_bias);
    s.push_back({"readout", std::move(w.bytes())});
  }
  return s;
}

}  // namespace detail

/// Serialises a model to checkpoint bytes. Deterministic: equal models give
/// equal bytes.
inline std::vector<std::uint8_t> serialize_checkpoint(const Model& m, Dtype dtype = default_dtype()) {
  const auto sections = detail::model_sections(m);
  ByteWriter payload;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const auto& s : sections) {
    spans.emplace_back(payload.bytes().size(), s.bytes.size());
    payload.put_bytes(s.bytes);
  }
  ByteWriter head;
  head.put_bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("DERS"), 4));
  head.put<std::uint32_t>(kCheckpointVersion);
  head.put<std::uint32_t>(dtype == Dtype::f64 ? 0u : 1u);
  head.put<std::uint32_t>(static_cast<std::uint32_t>(sections.size()));
  head.put<std::uint64_t>(payload.bytes().size());
  head.put<std::uint32_t>(crc32_of(payload.bytes()));
  ByteWriter table;
  for (std::size_t i = 0; i < sections.size(); ++i) {
    std::array<std::uint8_t, kSectionNameBytes> name{};
    if (sections[i].name.size() >= kSectionNameBytes) throw StateError("section name too long");
    std::memcpy(name.data(), sections[i].name.data(), sections[i].name.size());
    table.put_bytes(name);
    table.put<std::uint64_t>(spans[i].first);
    table.put<std::uint64_t>(spans[i].second);
  }
  std::vector<std::uint8_t> crc_input = head.bytes();
  crc_input.insert(crc_input.end(), table.bytes().begin(), table.bytes().end());
  head.put<std::uint32_t>(crc32_of(crc_input));

  std::vector<std::uint8_t> out = std::move(head.bytes());
  out.insert(out.end(), table.bytes().begin(), table.bytes().end());
  out.insert(out.end(), payload.bytes().begin(), payload.bytes().end());
  return out;
}

struct LoadedCheckpoint {
  Model model;
  Dtype dtype = Dtype::f64;
};

/// Parses checkpoint bytes. Every structural check happens before a model is
/// returned; there are no partial loads.
inline LoadedCheckpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) throw CorruptionError("checkpoint truncated: header incomplete");
  if (std::memcmp(bytes.data(), "DERS", 4) != 0) throw CorruptionError("not a checkpoint: bad magic");
  ByteReader h(bytes.subspan(4, kHeaderBytes - 4), "header");
  const auto version = h.get<std::uint32_t>();
  if (version > kCheckpointVersion)
    throw VersionError("checkpoint format version " + std::to_string(version) +
                       " is newer than the supported version " + std::to_string(kCheckpointVersion));
  if (version == 0) throw CorruptionError("checkpoint format version 0 is invalid");
  const auto dtype_tag = h.get<std::uint32_t>();
  const auto n_sections = h.get<std::uint32_t>();
  const auto payload_size = h.get<std::uint64_t>();
  const auto payload_crc = h.get<std::uint32_t>();
  const auto header_crc = h.get<std::uint32_t>();
  if (dtype_tag > 1) throw CorruptionError("invalid dtype tag " + std::to_string(dtype_tag));

  const std::size_t table_bytes = static_cast<std::size_t>(n_sections) * kSectionEntryBytes;
  if (bytes.size() < kHeaderBytes + table_bytes) throw CorruptionError("checkpoint truncated: section table");
  std::vector<std::uint8_t> crc_input(bytes.begin(), bytes.begin() + 28);
  crc_input.insert(crc_input.end(), bytes.begin() + kHeaderBytes,
                   bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderBytes + table_bytes));
  if (crc32_of(crc_input) != header_crc) throw CorruptionError("checkpoint header checksum mismatch");

  const std::size_t payload_at = kHeaderBytes + table_bytes;
  if (bytes.size() - payload_at < payload_size) throw CorruptionError("checkpoint truncated: payload");
  if (bytes.size() - payload_at > payload_size) throw CorruptionError("checkpoint has trailing bytes");
  const auto payload = bytes.subspan(payload_at, static_cast<std::size_t>(payload_size));
  if (crc32_of(payload) != payload_crc) throw CorruptionError("checkpoint payload checksum mismatch");

  std::map<std::string, std::span<const std::uint8_t>> sec;
  ByteReader t(bytes.subspan(kHeaderBytes, table_bytes), "section table");
  for (std::uint32_t i = 0; i < n_sections; ++i) {
    auto raw = t.get_bytes(kSectionNameBytes);
    std::string name(reinterpret_cast<const char*>(raw.data()), kSectionNameBytes);
    name.resize(name.find('\0') == std::string::npos ? kSectionNameBytes : name.find('\0'));
    const auto off = t.get<std::uint64_t>();
    const auto len = t.get<std::uint64_t>();
    if (off > payload.size() || len > payload.size() - off)
      throw CorruptionError("section " + name + " lies outside the payload");
    sec[name] = payload.subspan(static_cast<std::size_t>(off), static_cast<std::size_t>(len));
  }
  auto section = [&](const std::string& name) -> ByteReader {
    auto it = sec.find(name);
    if (it == sec.end()) throw CorruptionError("checkpoint missing section " + name);
    return ByteReader(it->second, "section " + name);
  };

  LoadedCheckpoint out;
  out.dtype = dtype_tag == 0 ? Dtype::f64 : Dtype::f32;
  Model& m = out.model;
  auto topo = section("topology");
  m.input_dim = topo.get<std::uint64_t>();
  m.output_dim = topo.get<std::uint64_t>();
  m.d = topo.get<std::uint64_t>();
  m.d_h = topo.get<std::uint64_t>();
  m.activation = detail::checked_enum<Activation>(topo.get<std::uint8_t>(), 2, "activation");
  const bool has_embed = topo.get<std::uint8_t>() != 0;
  const auto n_blocks = topo.get<std::uint64_t>();
  m.ancestor_params = topo.get<std::uint64_t>();
  topo.expect_end();

  auto seeds = section("seeds");
  const auto n_seeds = seeds.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_seeds; ++i) {
    std::string k = seeds.get_string();
    m.seeds[k] = seeds.get<std::uint64_t>();
  }
  seeds.expect_end();

  if (has_embed) {
    auto e = section("embed");
    m.embed = e.get_matrix();
    e.expect_end();
  }
  if (n_blocks > sec.size()) throw CorruptionError("block count exceeds section count");
  for (std::uint64_t b = 0; b < n_blocks; ++b) {
    auto r = section("block." + std::to_string(b));
    m.blocks.push_back(detail::read_block(r));
    r.expect_end();
  }
  auto ro = section("readout");
  m.readout = ro.get_matrix();
  m.readout_bias = ro.get_matrix();
  ro.expect_end();

  // Topology consistency.
  const std::size_t width = m.embed ? m.d : m.input_dim;
  if ((m.embed && (m.embed->rows() != m.input_dim || m.embed->cols() != m.d)) ||
      m.readout.rows() != width || m.readout.cols() != m.output_dim ||
      m.readout_bias.rows() != 1 || m.readout_bias.cols() != m.output_dim)
    throw CorruptionError("checkpoint topology does not match embed/readout shapes");
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    const Matrix& w_in = std::holds_alternative<FFN>(m.blocks[b])
                             ? std::get<FFN>(m.blocks[b]).w_in
                             : std::get<MoELayer>(m.blocks[b]).w_in.base;
    if (w_in.rows() != width)
      throw CorruptionError("block " + std::to_string(b) + " width does not match topology");
  }
  return out;
}

namespace detail {

inline void atomic_write(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw StateError("cannot open " + tmp.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw StateError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline void atomic_write_text(const std::filesystem::path& path, std::string_view text) {
  detail::atomic_write(path, std::span<const std::uint8_t>(
                                 reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw StateError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

/// Human-readable metadata written next to the checkpoint.
inline nlohmann::ordered_json checkpoint_sidecar(const Model& m, std::span<const std::uint8_t> bytes,
                                                 Dtype dtype) {
  nlohmann::ordered_json j;
  j["format"] = "DERS";
  j["version"] = kCheckpointVersion;
  j["dtype"] = dtype_name(dtype);
  j["file_crc32"] = crc32_of(bytes);
  j["file_bytes"] = bytes.size();
  j["topology"] = {{"input_dim", m.input_dim}, {"output_dim", m.output_dim}, {"d", m.d},
                   {"d_h", m.d_h},             {"activation", activation_name(m.activation)},
                   {"embed", m.embed.has_value()}, {"ancestor_params", m.ancestor_params}};
  auto blocks = nlohmann::ordered_json::array();
  for (const auto& b : m.blocks) {
    if (std::holds_alternative<FFN>(b)) {
      blocks.push_back({{"kind", "ffn"}});
      continue;
    }
    const auto& l = std::get<MoELayer>(b);
    auto encodings = nlohmann::ordered_json::array();
    for (const auto& d : l.w_in.deltas) encodings.push_back(encoding_name(encoding_of(d)));
    blocks.push_back({{"kind", "moe"},
                      {"origin", origin_name(l.origin)},
                      {"n_experts", l.n_experts},
                      {"topk_count", l.router.topk_count},
                      {"universal", l.universal.has_value()},
                      {"extended", l.extended},
                      {"shared_trainable", l.shared_trainable},
                      {"delta_encodings", encodings}});
  }
  j["blocks"] = blocks;
  j["seeds"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : m.seeds) j["seeds"][k] = v;
  return j;
}

/// Atomically writes <path> and <path>.json.
inline void save_checkpoint(const Model& m, const std::filesystem::path& path,
                            Dtype dtype = default_dtype()) {
  const auto bytes = serialize_checkpoint(m, dtype);
  detail::atomic_write(path, bytes);
  auto side = path;
  side += ".json";
  atomic_write_text(side, checkpoint_sidecar(m, bytes, dtype).dump(2) + "\n");
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return parse_checkpoint(bytes);
  } catch (const CorruptionError& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  } catch (const VersionError& e) {
    throw VersionError(path.string() + ": " + e.what());
  }
}

}  // namespace ders
