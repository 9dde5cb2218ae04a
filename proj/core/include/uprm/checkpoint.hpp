#pragma once

#include <cstdint>
#include <filesystem>

#include "uprm/model.hpp"

namespace uprm {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::uint64_t seed = 0;
  ModelParams params;
};

/// Line-oriented text: a JSON header {format, version, dims, seed}, then
/// for every parameter a line "param <name> <rows> <cols>" followed by one
/// line of shortest round-trip decimal values.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const ModelConfig& config, std::uint64_t seed);

/// Throws FormatError for a foreign format or version, ParseError with the
/// line number for malformed content, ConfigError when shapes disagree with
/// the stored dims.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace uprm
