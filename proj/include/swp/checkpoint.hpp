#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "swp/nn.hpp"
#include "swp/transforms.hpp"

namespace swp::checkpoint {

inline constexpr char kMagic[4] = {'S', 'W', 'P', 'K'};
inline constexpr std::uint32_t kVersion = 1;

// Reserved metadata keys written by save; callers add their own next to them.
inline constexpr const char* kTopologyKey = "topology";
inline constexpr const char* kInputShapeKey = "input_shape";
inline constexpr const char* kInstanceKey = "instance";

using Metadata = std::map<std::string, std::string>;

struct Checkpoint {
  nn::Model model;
  Metadata metadata;
};

// Byte image of a model. Records are "<layer>.<param>" for values,
// "<layer>.<param>.mask" and "<layer>.<param>.velocity" for the pruning mask
// and momentum. Throws ConfigError on metadata keys containing '=' or
// newlines, or Winograd layers built from different instances.
std::vector<std::uint8_t> serialize(const nn::Model& model, const Metadata& metadata = {});

// Throws FormatError on bad magic, unsupported version, truncation, trailing
// bytes, unknown or missing records, shape mismatches, and domain flags that
// disagree with the layer type.
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

// Writes to a temporary file in the same directory and renames it over `path`.
void save(const std::filesystem::path& path, const nn::Model& model, const Metadata& metadata = {});
Checkpoint load(const std::filesystem::path& path);

// Instance shared by the model's Winograd layers, if any.
std::optional<WinogradInstance> model_instance(const nn::Model& model);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string file_sha256(const std::filesystem::path& path);
// SHA-256 of serialize(model) without extra metadata.
std::string model_hash(const nn::Model& model);

std::string rng_state(const std::mt19937_64& rng);
void restore_rng(std::mt19937_64& rng, const std::string& state);

}  // namespace swp::checkpoint
