#pragma once

// Experiment configuration: a flat sectioned key-value text format.
//
//   # comment
//   [model]
//   dim = 2
//   drift = 0; x1
//   diffusion.1 = 1; 0
//   x0 = 0.5, -0.5
//
// Vector-field components are separated by ';', numeric lists by ','.
// Unknown sections or keys are rejected. See docs/config.md.

#include "hypolab/fieldlang.hpp"
#include "hypolab/flows.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hypolab::harness {

struct ModelBlock {
  int dim = 0;
  std::vector<std::string> drift;
  std::vector<std::vector<std::string>> diffusion;  // columns, 1..m
  std::vector<double> x0;
};

struct SimulationBlock {
  double T = 1.0;
  std::size_t n_steps = 1024;
  flows::Scheme scheme = flows::Scheme::TamedEuler;
  std::size_t paths = 1000;
  std::uint64_t seed = 0;
  std::size_t refine = 1;
  std::optional<double> monotonicity_L;
  double max_divergence_fraction = 0.01;
};

/// Subcommand-specific settings; each command reads the keys it needs.
struct AnalysisBlock {
  std::optional<int> L;
  std::optional<std::vector<double>> K;
  std::optional<double> t;
  std::optional<std::string> which;  // C-matrix | Q-matrix
  std::optional<double> epsilon;
  std::optional<std::vector<std::string>> field;  // V, or a single "sigmaK"
  std::optional<double> p;
  std::optional<std::vector<double>> p_list;
  std::optional<std::vector<double>> t_list;
  std::optional<double> margin;
  std::optional<int> N;
  std::optional<double> M;
  std::optional<double> radius;
  std::optional<std::size_t> n_ball;
  std::optional<std::vector<double>> grid_lo;
  std::optional<std::vector<double>> grid_hi;
  std::optional<std::vector<double>> grid_n;
  std::optional<std::vector<double>> bandwidth;
  std::optional<double> box_lo;
  std::optional<double> box_hi;
  std::optional<int> box_n;
  std::optional<std::vector<double>> probe_lo;
  std::optional<std::vector<double>> probe_hi;
  std::optional<std::size_t> probe_samples;
  std::optional<double> declared_L;
  std::optional<double> declared_L1;
  std::optional<int> declared_N;
  std::optional<double> declared_L3;
  std::optional<std::vector<std::vector<double>>> moment_x0;
  std::optional<std::size_t> save_paths;
};

struct ExperimentConfig {
  ModelBlock model;
  SimulationBlock simulation;
  AnalysisBlock analysis;
  std::optional<std::string> output_dir;

  fieldlang::CoefficientSet coefficients() const;
  flows::SimConfig sim_config() const;
};

/// Throws ConfigError naming the offending key or line.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::string& path);

/// Canonical text of every resolved value, re-parseable by parse_config.
std::string resolved_text(const ExperimentConfig& config);

/// SHA-256 of the resolved model, simulation and analysis blocks, excluding
/// the seed and the output directory.
std::string config_hash(const ExperimentConfig& config);

}  // namespace hypolab::harness
