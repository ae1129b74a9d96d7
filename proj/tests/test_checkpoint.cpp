// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ders/checkpoint.hpp"
#include "ders/compress.hpp"
#include "ders/upcycle.hpp"

using namespace ders;
namespace fs = std::filesystem;

namespace {

Model base_model(std::uint64_t seed = 1) {
  RngStream rng(seed, 1);
  return make_dense_model(6, 3, 8, 16, 2, Activation::gelu, rng);
}

Model jittered(Model m) {
  RngStream rng(9, 9);
  for_each_trainable(m, [&](const std::string&, std::span<double> p) {
    for (double& v : p) v += 0.01 * rng.normal();
  });
  return m;
}

// One model per delta encoding.
std::vector<std::pair<std::string, Model>> encoding_models() {
  std::vector<std::pair<std::string, Model>> out;
  UpcycleConfig uc;
  uc.parallel_universal = true;
  const Model v = jittered(upcycle(base_model(), uc));
  out.emplace_back("dense", v);
  uc.method = UpcycleMethod::ders_sm;
  out.emplace_back("sparse", jittered(upcycle(base_model(), uc)));
  uc.method = UpcycleMethod::ders_lm;
  uc.extended = true;
  out.emplace_back("lowrank", jittered(upcycle(base_model(), uc)));
  CompressionSpec spec;
  spec.technique = CompressTechnique::quantize;
  spec.bit_width = 1;
  out.emplace_back("quantized1", ders_compress(v, spec));
  spec.bit_width = 4;
  spec.extended = true;
  out.emplace_back("quantized4", ders_compress(v, spec));
  spec = {};
  spec.drop_rate = 0.9;
  out.emplace_back("rescaled_sparse", ders_compress(v, spec));
  return out;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ders_ckpt_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Checkpoint, RoundTripsEveryEncodingBitExactly) {
  for (const auto& [name, m] : encoding_models()) {
    const auto bytes = serialize_checkpoint(m, Dtype::f64);
    const LoadedCheckpoint l = parse_checkpoint(bytes);
    EXPECT_EQ(l.model, m) << name;
    EXPECT_EQ(serialize_checkpoint(l.model, Dtype::f64), bytes) << name;
  }
}

TEST(Checkpoint, DtypeTagRecorded) {
  const Model m = base_model();
  EXPECT_EQ(parse_checkpoint(serialize_checkpoint(m, Dtype::f32)).dtype, Dtype::f32);
  EXPECT_EQ(parse_checkpoint(serialize_checkpoint(m, Dtype::f64)).dtype, Dtype::f64);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const fs::path dir = temp_dir("resave");
  for (const auto& [name, m] : encoding_models()) {
    save_checkpoint(m, dir / "a.ders");
    const LoadedCheckpoint l = load_checkpoint(dir / "a.ders");
    save_checkpoint(l.model, dir / "b.ders", l.dtype);
    EXPECT_EQ(read_file_bytes(dir / "a.ders"), read_file_bytes(dir / "b.ders")) << name;
    EXPECT_TRUE(fs::exists(dir / "a.ders.json"));
    EXPECT_FALSE(fs::exists(dir / "a.ders.tmp"));
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, SidecarDescribesModel) {
  const fs::path dir = temp_dir("sidecar");
  const Model m = encoding_models()[1].second;
  save_checkpoint(m, dir / "m.ders");
  std::ifstream f(dir / "m.ders.json");
  const auto j = nlohmann::json::parse(f);
  EXPECT_EQ(j.at("format"), "DERS");
  EXPECT_EQ(j.at("version"), kCheckpointVersion);
  EXPECT_EQ(j.at("file_bytes").get<std::size_t>(), fs::file_size(dir / "m.ders"));
  EXPECT_EQ(j.at("file_crc32").get<std::uint32_t>(), crc32_of(read_file_bytes(dir / "m.ders")));
  EXPECT_EQ(j.at("blocks").at(0).at("delta_encodings").at(0), "sparse");
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptedPayloadByteIsChecksumError) {
  const auto bytes = serialize_checkpoint(encoding_models()[0].second);
  for (std::size_t pos : {bytes.size() - 1, bytes.size() / 2, bytes.size() - 100}) {
    auto bad = bytes;
    bad[pos] ^= 0x10;
    try {
      parse_checkpoint(bad);
      FAIL() << pos;
    } catch (const CorruptionError& e) {
      EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
    }
  }
}

TEST(Checkpoint, CorruptedHeaderIsChecksumError) {
  auto bytes = serialize_checkpoint(base_model());
  bytes[kHeaderBytes + 3] ^= 0x01;  // section name
  EXPECT_THROW(parse_checkpoint(bytes), CorruptionError);
  bytes = serialize_checkpoint(base_model());
  bytes[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bytes), CorruptionError);
}

TEST(Checkpoint, TruncationIsCorruption) {
  const auto bytes = serialize_checkpoint(base_model());
  for (std::size_t n : {std::size_t{0}, std::size_t{10}, kHeaderBytes + 5, bytes.size() - 1}) {
    EXPECT_THROW(parse_checkpoint(std::span(bytes).first(n)), CorruptionError) << n;
  }
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(parse_checkpoint(longer), CorruptionError);
}

TEST(Checkpoint, NewerVersionIsVersionError) {
  auto bytes = serialize_checkpoint(base_model());
  bytes[4] = static_cast<std::uint8_t>(kCheckpointVersion + 1);
  EXPECT_THROW(parse_checkpoint(bytes), VersionError);
}

TEST(Checkpoint, LoadMissingFileIsStateError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/none.ders"), StateError);
}

TEST(Checkpoint, LoadReportsPathOnCorruption) {
  const fs::path dir = temp_dir("badfile");
  save_checkpoint(base_model(), dir / "m.ders");
  auto bytes = read_file_bytes(dir / "m.ders");
  bytes.back() ^= 0xFF;
  std::ofstream(dir / "m.ders", std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                                         static_cast<std::streamsize>(bytes.size()));
  try {
    load_checkpoint(dir / "m.ders");
    FAIL();
  } catch (const CorruptionError& e) {
    EXPECT_NE(std::string(e.what()).find("m.ders"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, ForwardUnchangedAfterRoundTrip) {
  RngStream rng(4, 4);
  const Matrix x = uniform_matrix(20, 6, -1, 1, rng);
  for (const auto& [name, m] : encoding_models()) {
    const Model l = parse_checkpoint(serialize_checkpoint(m)).model;
    EXPECT_EQ(model_forward(l, x), model_forward(m, x)) << name;
  }
}

TEST(Crc32, KnownVector) {
  const std::string s = "123456789";
  EXPECT_EQ(crc32_of(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())), 0xCBF43926u);
}
