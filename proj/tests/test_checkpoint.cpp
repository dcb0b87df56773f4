#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "nt/checkpoint.hpp"
#include "nt/fusion.hpp"
#include "oracles.hpp"

using namespace nt;
namespace fs = std::filesystem;

namespace {

ErrorKind decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("decode succeeded");
  return ErrorKind::Usage;
}

std::uint32_t header_length(const std::vector<std::uint8_t>& b) {
  return std::uint32_t{b[9]} | std::uint32_t{b[10]} << 8 | std::uint32_t{b[11]} << 16 | std::uint32_t{b[12]} << 24;
}

}  // namespace

TEST_CASE("checkpoints round-trip bit-exactly over 100 mixed nets") {
  RngStream rng(71, "ckpt");
  const fs::path dir = fs::temp_directory_path() / "nt_tests_ckpt";
  fs::create_directories(dir);
  for (std::size_t i = 0; i < 100; ++i) {
    Network net = i % 3 == 0 ? oracle::random_mlp(rng, 2 + rng.below(6), 2 + rng.below(4), 1 + rng.below(3), 1 + rng.below(9))
                             : oracle::random_conv_net(rng, {1 + rng.below(2), 6, 6}, 3, 1 + rng.below(4), i % 2 == 0,
                                                       i % 4 < 2, i % 5 < 3);
    oracle::randomize_batchnorm(net, rng);
    CheckpointMeta meta{i, i % 7, {{"test_accuracy", rng.uniform()}}};
    const auto bytes = encode_checkpoint(net, meta);
    const Checkpoint c = decode_checkpoint(bytes);
    CHECK(c.net.identical(net));
    CHECK(c.net.input_shape() == net.input_shape());
    CHECK(c.meta.seed == i);
    CHECK(c.meta.metrics == meta.metrics);
    CHECK(encode_checkpoint(c.net, c.meta) == bytes);
    if (i % 10 == 0) {
      const fs::path p = dir / ("net" + std::to_string(i) + ".ntck");
      save_checkpoint(net, p, meta);
      CHECK(load_checkpoint(p).identical(net));
    }
  }
}

TEST_CASE("layout: magic, version and little-endian header length") {
  RngStream rng(72, "layout");
  const Network net = oracle::random_mlp(rng, 3, 2, 1, 2);
  const auto b = encode_checkpoint(net);
  CHECK(std::memcmp(b.data(), kCheckpointMagic, 8) == 0);
  CHECK(b[8] == kCheckpointVersion);
  const std::uint32_t n = header_length(b);
  const auto header = nlohmann::json::parse(b.begin() + 13, b.begin() + 13 + n);
  CHECK(header["arch_id"] == net.arch_id());
  CHECK(b.size() == 13 + n + net.parameter_count() * 4);
}

TEST_CASE("corrupted checkpoints fail with typed errors") {
  RngStream rng(73, "corrupt");
  const Network net = oracle::random_conv_net(rng, {1, 5, 5}, 2, 2, true, false, false, false);
  const auto good = encode_checkpoint(net);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(decode_error(bad_magic) == ErrorKind::BadMagic);

  auto bad_version = good;
  bad_version[8] = 9;
  CHECK(decode_error(bad_version) == ErrorKind::VersionUnsupported);

  CHECK(decode_error({good.begin(), good.begin() + 10}) == ErrorKind::TruncatedFile);
  CHECK(decode_error({good.begin(), good.begin() + 20}) == ErrorKind::TruncatedFile);

  auto truncated = good;
  truncated.resize(truncated.size() - 4);
  CHECK(decode_error(truncated) == ErrorKind::PayloadLengthMismatch);
  auto extended = good;
  extended.push_back(0);
  CHECK(decode_error(extended) == ErrorKind::PayloadLengthMismatch);

  // Edit the header to claim a wider conv while keeping the arch id consistent.
  const std::uint32_t n = header_length(good);
  auto header = nlohmann::json::parse(good.begin() + 13, good.begin() + 13 + n);
  header["arch"][0]["out"] = 3;
  header["arch"][1]["channels"] = 3;
  header["arch"][4]["in"] = 75;
  Network wider({1, 5, 5}, [&] {
    std::vector<LayerSpec> specs;
    for (const auto& j : header["arch"]) specs.push_back(layer_spec_from_json(j));
    return specs;
  }());
  header["arch_id"] = wider.arch_id();
  const std::string text = header.dump();
  std::vector<std::uint8_t> edited(good.begin(), good.begin() + 9);
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int s = 0; s < 4; ++s) edited.push_back(static_cast<std::uint8_t>(len >> (8 * s)));
  edited.insert(edited.end(), text.begin(), text.end());
  edited.insert(edited.end(), good.begin() + 13 + n, good.end());
  CHECK(decode_error(edited) == ErrorKind::PayloadLengthMismatch);

  header["arch_id"] = "0000";
  const std::string t2 = header.dump();
  std::vector<std::uint8_t> mismatched(good.begin(), good.begin() + 9);
  const auto len2 = static_cast<std::uint32_t>(t2.size());
  for (int s = 0; s < 4; ++s) mismatched.push_back(static_cast<std::uint8_t>(len2 >> (8 * s)));
  mismatched.insert(mismatched.end(), t2.begin(), t2.end());
  mismatched.insert(mismatched.end(), good.begin() + 13 + n, good.end());
  CHECK(decode_error(mismatched) == ErrorKind::ArchMismatch);

  try {
    load_checkpoint("/nonexistent/dir/x.ntck");
    FAIL("expected IoError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::IoError);
  }
}

TEST_CASE("fused networks survive a checkpoint round trip") {
  RngStream rng(74, "fusedckpt");
  std::vector<Network> members{oracle::random_mlp(rng, 4, 2, 2, 3), oracle::random_mlp(rng, 4, 2, 2, 3)};
  const Network cat = concat_fuse(members);
  const Network back = decode_checkpoint(encode_checkpoint(cat)).net;
  Tensor x = oracle::random_tensor({5, 4}, rng);
  CHECK(back.predict(x).identical(cat.predict(x)));
}
