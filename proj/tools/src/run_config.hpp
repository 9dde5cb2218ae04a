#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "uprm/datagen.hpp"
#include "uprm/model.hpp"
#include "uprm/train.hpp"

namespace uprm::cli {

enum class Split { heldout, train, all };

struct RunConfig {
  std::uint64_t seed = 1;
  GenProfile profile;
  ModelConfig model;
  TrainConfig train;
  /// Use the 2e-5 fine-tuning learning rate instead of the desk default.
  bool finetune_lr = false;
  /// Leading share of the dataset used for training; the rest is held out.
  double train_fraction = 0.8;

  double threshold = 0.5;
  std::vector<double> tiou;
  Split eval_split = Split::heldout;

  std::vector<std::string> ablate_variants{"full", "no-hpe", "no-ore", "no-vbe", "no-upe", "no-ptr"};
  /// Empty means the run seed alone.
  std::vector<std::uint64_t> ablate_seeds;

  std::size_t grad_seeds = 100;
  std::vector<std::string> grad_cases;
  std::string inject_fault;

  std::filesystem::path data;
  std::filesystem::path ckpt;
  std::filesystem::path baseline_ckpt;
  std::filesystem::path out;

  /// `tiou` when set, otherwise the usual set for the named profile.
  std::vector<double> thresholds(const std::string& profile_name) const;
  /// Range checks on every field. Throws ConfigError naming the key.
  void validate() const;
};

/// Values given on the command line. They win over the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::optional<double> threshold;
  std::optional<std::string> profile;
  std::optional<std::string> inject_fault;
  std::optional<std::filesystem::path> data;
  std::optional<std::filesystem::path> ckpt;
  std::optional<std::filesystem::path> baseline_ckpt;
  std::optional<std::filesystem::path> out;
  bool finetune_lr = false;
};

/// Built-in defaults, then the INI file (if any), then the overrides.
/// Unknown sections or keys and unparsable values raise ConfigError.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                          const Overrides& overrides);

/// The effective configuration as INI text that load_run_config reads back
/// to the same values.
void write_run_config(std::ostream& os, const RunConfig& config);

}  // namespace uprm::cli
