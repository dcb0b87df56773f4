#include "nt/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <type_traits>

namespace nt {

using nlohmann::json;

namespace {

constexpr std::size_t kPreamble = sizeof(kCheckpointMagic) + 1 + 4;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

template <class Net>
auto payload_tensors(Net& net) {
  using T = std::conditional_t<std::is_const_v<Net>, const Tensor, Tensor>;
  std::vector<T*> out;
  for (auto& l : net.layers()) {
    for (T* t : {&l.weight, &l.bias, &l.running_mean, &l.running_var}) {
      if (!t->empty()) out.push_back(t);
    }
  }
  return out;
}

}  // namespace

json layer_spec_to_json(const LayerSpec& s) {
  json j = {{"kind", to_string(s.kind)}};
  switch (s.kind) {
    case LayerKind::Linear:
      j["in"] = s.in;
      j["out"] = s.out;
      break;
    case LayerKind::Conv2D:
      j["in"] = s.in;
      j["out"] = s.out;
      j["kernel_h"] = s.kernel_h;
      j["kernel_w"] = s.kernel_w;
      j["stride"] = s.stride;
      j["padding"] = s.padding;
      break;
    case LayerKind::BatchNorm2D: j["channels"] = s.out; break;
    case LayerKind::MaxPool2D: j["pool"] = s.pool; break;
    default: break;
  }
  return j;
}

LayerSpec layer_spec_from_json(const json& j) {
  const LayerKind kind = layer_kind_from_string(j.at("kind").get<std::string>());
  switch (kind) {
    case LayerKind::Linear: return LayerSpec::linear(j.at("in"), j.at("out"));
    case LayerKind::Conv2D: {
      LayerSpec s = LayerSpec::conv(j.at("in"), j.at("out"), j.at("kernel_h"), j.value("stride", 1u),
                                    j.value("padding", 0u));
      s.kernel_w = j.value("kernel_w", s.kernel_h);
      return s;
    }
    case LayerKind::BatchNorm2D: return LayerSpec::batchnorm(j.at("channels"));
    case LayerKind::MaxPool2D: return LayerSpec::maxpool(j.at("pool"));
    case LayerKind::Flatten: return LayerSpec::flatten();
    case LayerKind::ReLU: return LayerSpec::relu();
  }
  throw Error(ErrorKind::InvalidArg, "unknown layer kind");
}

std::vector<std::uint8_t> encode_checkpoint(const Network& net, const CheckpointMeta& meta) {
  json arch = json::array();
  for (const auto& s : net.specs()) arch.push_back(layer_spec_to_json(s));
  json metrics = json::object();
  for (const auto& [k, v] : meta.metrics) metrics[k] = v;
  const json header = {{"input_shape", net.input_shape()},
                       {"arch", arch},
                       {"arch_id", net.arch_id()},
                       {"seed", meta.seed},
                       {"epoch", meta.epoch},
                       {"metrics", metrics}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  out.push_back(kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const Tensor* t : payload_tensors(net)) {
    for (float v : t->values()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      put_u32(out, bits);
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw Error(ErrorKind::BadMagic, "not a checkpoint");
  }
  if (bytes.size() < kPreamble) throw Error(ErrorKind::TruncatedFile, "checkpoint preamble cut short");
  const std::uint8_t version = bytes[sizeof(kCheckpointMagic)];
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::VersionUnsupported, "checkpoint version " + std::to_string(version));
  }
  const std::uint32_t header_len = get_u32(bytes.data() + sizeof(kCheckpointMagic) + 1);
  if (bytes.size() < kPreamble + header_len) {
    throw Error(ErrorKind::TruncatedFile, "checkpoint header cut short");
  }
  json header;
  try {
    header = json::parse(bytes.begin() + kPreamble, bytes.begin() + kPreamble + header_len);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::InvalidArg, std::string("checkpoint header: ") + e.what());
  }
  std::vector<LayerSpec> specs;
  for (const auto& s : header.at("arch")) specs.push_back(layer_spec_from_json(s));
  Checkpoint ck;
  ck.net = Network(header.at("input_shape").get<Shape>(), std::move(specs));
  if (ck.net.arch_id() != header.at("arch_id").get<std::string>()) {
    throw Error(ErrorKind::ArchMismatch, "header arch_id does not match its layer list");
  }
  ck.meta.seed = header.value("seed", std::uint64_t{0});
  ck.meta.epoch = header.value("epoch", std::size_t{0});
  if (header.contains("metrics")) {
    for (const auto& [k, v] : header.at("metrics").items()) ck.meta.metrics[k] = v.get<double>();
  }
  const auto tensors = payload_tensors(ck.net);
  std::size_t expected = 0;
  for (const Tensor* t : tensors) expected += t->size();
  const std::size_t payload = bytes.size() - kPreamble - header_len;
  if (payload != expected * 4) {
    throw Error(ErrorKind::PayloadLengthMismatch, "payload has " + std::to_string(payload) +
                                                      " bytes, architecture implies " +
                                                      std::to_string(expected * 4));
  }
  const std::uint8_t* p = bytes.data() + kPreamble + header_len;
  for (Tensor* t : tensors) {
    for (float& v : t->values()) {
      const std::uint32_t bits = get_u32(p);
      std::memcpy(&v, &bits, sizeof(v));
      p += 4;
    }
  }
  return ck;
}

void save_checkpoint(const Network& net, const std::filesystem::path& path,
                     const CheckpointMeta& meta) {
  const auto bytes = encode_checkpoint(net, meta);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Network load_checkpoint(const std::filesystem::path& path) { return read_checkpoint(path).net; }

}  // namespace nt
