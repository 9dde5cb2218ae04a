#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "uprm/datagen.hpp"

namespace uprm {

inline constexpr int kDatasetVersion = 1;

struct Dataset {
  GenProfile profile;
  std::vector<SyntheticVideo> videos;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Newline-delimited JSON: a header line with format, version and profile,
/// then one record per video. Doubles are written with round-trip
/// precision.
void write_dataset(const std::filesystem::path& path, const GenProfile& profile,
                   std::span<const SyntheticVideo> videos);

/// Throws ParseError (1-based line) for malformed records, FormatError for
/// an unknown format or version, DataError if the file cannot be opened.
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace uprm
