#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "nt/network.hpp"

namespace nt {

inline constexpr char kCheckpointMagic[8] = {'N', 'T', 'C', 'K', 'P', 'T', '1', '\0'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::map<std::string, double> metrics;
};

struct Checkpoint {
  Network net;
  CheckpointMeta meta;
};

nlohmann::json layer_spec_to_json(const LayerSpec& s);
LayerSpec layer_spec_from_json(const nlohmann::json& j);

// Layout: magic[8] | version u8 | header length u32 LE | JSON header |
// payload of f32 LE values (weight, bias, running mean, running var per layer).
std::vector<std::uint8_t> encode_checkpoint(const Network& net, const CheckpointMeta& meta = {});
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Network& net, const std::filesystem::path& path,
                     const CheckpointMeta& meta = {});
Checkpoint read_checkpoint(const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace nt
