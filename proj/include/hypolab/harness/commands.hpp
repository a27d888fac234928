#pragma once

// Subcommands of the hypo-lab tool. Each run writes its outputs, the resolved
// config and a manifest into one directory.

#include "hypolab/harness/artifacts.hpp"
#include "hypolab/harness/config.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace hypolab::harness {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDivergence = 3;
inline constexpr int kExitInvariant = 4;

/// check-hormander, simulate, malliavin, tails, remainder-tails, det-moments,
/// density, probe-assumptions.
const std::vector<std::string>& subcommands();

struct RunOptions {
  std::filesystem::path out_dir;
  int workers = 1;
};

struct RunResult {
  int exit_code = kExitOk;
  std::string message;  // set for non-zero exit codes
  std::string config_hash;
  std::vector<OutputFile> files;
};

/// Checks the keys a subcommand needs; throws ConfigError. Runs before any
/// simulation.
void validate_for(std::string_view subcommand, const ExperimentConfig& config);

/// Never throws for config, numerical or invariant failures; these map to
/// exit codes 2, 3 and 4. Nothing is written when validation fails.
RunResult run(std::string_view subcommand, const ExperimentConfig& config, const RunOptions& options);

std::string tool_version();

}  // namespace hypolab::harness
