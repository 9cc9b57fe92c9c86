#pragma once

// Checkpoint layout (all integers little-endian):
//   "PFCK"            4 bytes magic
//   version           u32
//   manifest_size     u64
//   manifest          JSON text, manifest_size bytes
//   payload           raw f32 values; tensor offsets are byte offsets into it

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointform/error.hpp"
#include "pointform/model.hpp"

namespace pointform {

inline constexpr char kCheckpointMagic[4] = {'P', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t step = 0;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();
};

struct Checkpoint {
  TransformerModel model;
  CheckpointMeta meta;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const unsigned char* p) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(p[i]) << (8 * i);
  return value;
}

[[noreturn]] inline void bad_checkpoint(const std::string& why) { fail(ErrorKind::Format, "checkpoint: " + why); }

}  // namespace detail

inline std::string encode_checkpoint(const TransformerModel& model, const CheckpointMeta& meta) {
  nlohmann::json manifest;
  manifest["config"] = model.config();
  manifest["step"] = meta.step;
  manifest["rng_state"] = meta.rng_state;
  manifest["extra"] = meta.extra;
  auto& tensors = manifest["tensors"] = nlohmann::json::array();
  std::string payload;
  for (const auto& e : model.params().entries()) {
    tensors.push_back({{"name", e.name},
                       {"shape", e.tensor.shape()},
                       {"offset", payload.size()},
                       {"trainable", e.tensor.requires_grad()}});
    for (double v : e.tensor.values()) detail::put_le(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  manifest["payload_bytes"] = payload.size();
  const std::string text = manifest.dump();

  std::string out(kCheckpointMagic, 4);
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  out += payload;
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) detail::bad_checkpoint("bad magic");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const auto version = detail::get_le<std::uint32_t>(raw + 4);
  if (version != kCheckpointVersion) detail::bad_checkpoint("unsupported version " + std::to_string(version));
  const auto manifest_size = detail::get_le<std::uint64_t>(raw + 8);
  if (manifest_size > bytes.size() - 16) detail::bad_checkpoint("manifest size exceeds file");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(manifest_size));
  } catch (const nlohmann::json::exception& e) {
    detail::bad_checkpoint(std::string("manifest is not valid JSON: ") + e.what());
  }
  const std::size_t payload_begin = 16 + manifest_size;
  const std::size_t payload_size = bytes.size() - payload_begin;

  try {
    ModelConfig config = manifest.at("config").get<ModelConfig>();
    try {
      config.validate();
    } catch (const Error& e) {
      detail::bad_checkpoint(std::string("invalid configuration: ") + e.what());
    }
    TransformerModel model(config, 0);
    auto& params = model.params();
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != params.size()) detail::bad_checkpoint("tensor count does not match configuration");
    std::size_t next_free = 0;
    for (const auto& t : tensors) {
      const auto name = t.at("name").get<std::string>();
      if (!params.contains(name)) detail::bad_checkpoint("unknown tensor " + name);
      Tensor& target = params.get(name);
      const auto shape = t.at("shape").get<Shape>();
      if (shape != target.shape()) detail::bad_checkpoint("shape mismatch for " + name);
      const auto offset = t.at("offset").get<std::uint64_t>();
      const std::size_t bytes_needed = target.numel() * 4;
      if (offset < next_free) detail::bad_checkpoint("offsets overlap or are not ascending at " + name);
      if (offset > payload_size || bytes_needed > payload_size - offset) detail::bad_checkpoint("tensor " + name + " exceeds payload");
      next_free = offset + bytes_needed;
      auto values = target.mutable_values();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const auto word = detail::get_le<std::uint32_t>(raw + payload_begin + offset + 4 * i);
        values[i] = static_cast<double>(std::bit_cast<float>(word));
      }
      target.set_requires_grad(t.at("trainable").get<bool>());
    }
    CheckpointMeta meta;
    meta.step = manifest.at("step").get<std::uint64_t>();
    meta.rng_state = manifest.at("rng_state").get<std::string>();
    meta.extra = manifest.at("extra");
    return Checkpoint{std::move(model), std::move(meta)};
  } catch (const nlohmann::json::exception& e) {
    detail::bad_checkpoint(std::string("malformed manifest: ") + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model, const CheckpointMeta& meta = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Data, "cannot write checkpoint " + path.string());
  const auto bytes = encode_checkpoint(model, meta);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Data, "cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace pointform
