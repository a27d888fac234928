#pragma once

// Path simulation of X, the Jacobian flow J and its inverse K, Malliavin
// derivatives and matrices, iterated Stratonovich integrals and the chaos
// remainder, all on a shared Brownian grid.

#include "hypolab/brackets.hpp"
#include "hypolab/fieldlang.hpp"
#include "hypolab/rng.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hypolab::flows {

using brackets::BracketTable;
using brackets::MultiIndex;
using fieldlang::CoefficientSet;
using fieldlang::VectorField;

enum class Scheme { TamedEuler, SplitStepBackwardEuler, Euler };

std::string_view scheme_name(Scheme s) noexcept;
/// Accepts "tamed-euler", "split-step-backward-euler", "euler".
Scheme parse_scheme(std::string_view name);

struct SimConfig {
  double T = 1.0;
  std::size_t n_steps = 1024;  // power of two
  Scheme scheme = Scheme::TamedEuler;
  std::uint64_t seed = 0;
  std::vector<double> x0;
  /// Brownian increments are drawn on n_steps / refine steps and bridged up.
  /// Runs sharing the coarse grid then see the same Brownian path.
  std::size_t refine = 1;
  /// Declared one-sided Lipschitz constant; split-step rejects h * L >= 1.
  std::optional<double> monotonicity_L;

  double h() const noexcept { return T / static_cast<double>(n_steps); }
  bool comparison_only() const noexcept { return scheme == Scheme::Euler; }
  /// Throws ConfigError.
  void validate() const;
};

/// Values of a process on the grid: size() rows of `width` doubles.
struct GridPath {
  std::size_t width = 0;
  std::vector<double> values;

  GridPath() = default;
  GridPath(std::size_t width_, std::size_t rows) : width(width_), values(width_ * rows, 0.0) {}

  std::size_t size() const noexcept { return width ? values.size() / width : 0; }
  std::span<double> at(std::size_t k) noexcept { return {values.data() + k * width, width}; }
  std::span<const double> at(std::size_t k) const noexcept { return {values.data() + k * width, width}; }
};

/// Brownian motion on t_k = k h, stored as cumulative values W(t_k).
/// Increments are derived as W(t_{k+1}) - W(t_k), so coarsening (dropping
/// every other node) reproduces the coarse increments bit for bit.
class BrownianGrid {
public:
  BrownianGrid(int noise_dim, double T, GridPath W);

  int noise_dim() const noexcept { return noise_dim_; }
  std::size_t n_steps() const noexcept { return W_.size() - 1; }
  double T() const noexcept { return T_; }
  double h() const noexcept { return T_ / static_cast<double>(n_steps()); }
  double t(std::size_t k) const noexcept { return static_cast<double>(k) * h(); }

  double W(std::size_t k, int i) const noexcept { return W_.values[k * W_.width + static_cast<std::size_t>(i)]; }
  double dW(std::size_t k, int i) const noexcept { return W(k + 1, i) - W(k, i); }
  const GridPath& values() const noexcept { return W_; }

  /// Brownian-bridge refinement to twice as many steps. Normals are read from
  /// `normals` at an index range reserved for `level`.
  BrownianGrid refined(const rng::NormalStream& normals, int level) const;
  /// Every other node. Requires an even step count.
  BrownianGrid coarsened() const;

private:
  int noise_dim_;
  double T_;
  GridPath W_;
};

/// Deterministic in (config.seed, stream); increments N(0, h I_m).
BrownianGrid sample_brownian(const SimConfig& config, int noise_dim, std::uint64_t stream);

/// Compiled tapes for b, sigma and their Jacobians.
class Model {
public:
  explicit Model(const CoefficientSet& c);

  int dim() const noexcept { return dim_; }
  int noise_dim() const noexcept { return noise_dim_; }
  const CoefficientSet& coefficients() const noexcept { return coefficients_; }

  /// Each returns false if a value is non-finite.
  bool drift(std::span<const double> x, std::span<double> out) const noexcept;
  /// d x m, row-major: out[j*m + i] = sigma^{i+1}_j(x).
  bool diffusion(std::span<const double> x, std::span<double> out) const noexcept;
  /// d x d, out[j*d + l] = d b_j / d x_l.
  bool drift_jacobian(std::span<const double> x, std::span<double> out) const noexcept;
  /// Jacobian of column i (0-based), d x d.
  bool diffusion_jacobian(int i, std::span<const double> x, std::span<double> out) const noexcept;

private:
  CoefficientSet coefficients_;
  int dim_;
  int noise_dim_;
  fieldlang::CompiledField drift_;
  std::vector<fieldlang::CompiledField> columns_;
  fieldlang::CompiledField drift_jac_;
  std::vector<fieldlang::CompiledField> column_jacs_;
};

struct Trajectory {
  int dim = 0;
  double h = 0.0;
  GridPath X;            // X_k, k = 0..n
  GridPath stage;        // split-step only: X*_k solving X* = X_k + h b(X*)
  double t(std::size_t k) const noexcept { return static_cast<double>(k) * h; }
  std::size_t n_steps() const noexcept { return X.size() - 1; }
};

struct FlowTrajectory {
  int dim = 0;
  GridPath J;  // d x d row-major per node
  GridPath K;
};

/// Throws DivergenceError on a non-finite state, ConvergenceError if Newton
/// fails within 50 iterations.
Trajectory simulate_x(const Model& model, const SimConfig& config, const BrownianGrid& grid);

/// J and K along a frozen X path. Throws DivergenceError on non-finite entries.
FlowTrajectory simulate_flow(const Model& model, const SimConfig& config, const BrownianGrid& grid,
                             const Trajectory& trajectory);

/// D_s X(t) = J_t K_s sigma(X_s), d x m.
Eigen::MatrixXd malliavin_derivative(std::size_t s_index, std::size_t t_index, const FlowTrajectory& flows,
                                     const Trajectory& trajectory, const Model& model);

struct MalliavinPair {
  Eigen::MatrixXd C;
  Eigen::MatrixXd Q;
  std::string quadrature = "left-endpoint";
};

/// C(t) = sum_{k < t_index} h (K_k sigma_k)(K_k sigma_k)^T and Q = J C J^T,
/// both symmetrised.
MalliavinPair malliavin_matrices(const FlowTrajectory& flows, const Trajectory& trajectory, const Model& model,
                                 std::size_t t_index);

/// C(t_k) for every k (each row d x d, symmetric by construction).
GridPath malliavin_C_path(const FlowTrajectory& flows, const Trajectory& trajectory, const Model& model);

/// Q(t_k) = J_k C(t_k) J_k^T for every k, symmetrised.
GridPath malliavin_Q_path(const FlowTrajectory& flows, const GridPath& C_path);

/// S^(alpha)(t_k, Z) for all k. Integrals are nested with the first entry of
/// alpha innermost: S^(a1..an) = int S^(a1..a_{n-1}) o dW^{an}. Stratonovich
/// integrals use the trapezoid rule in the integrand; W^0(t) = t. With Z
/// omitted (Z = 1) the result is I^(alpha).
GridPath iterated_integral(const MultiIndex& alpha, const BrownianGrid& grid, const GridPath* Z = nullptr);

/// Truncated expansion of K(t) V(X(t)) in iterated integrals around x0.
///
/// The term for alpha carries the bracket T_(alpha)(V)(x0) and the iterated
/// integral with the entries of alpha taken in reverse order, since the bracket
/// applied last corresponds to the innermost integral.
class ChaosExpansion {
public:
  /// `base` is the 1-based index of V among the table's bases. The table must
  /// contain every alpha with ||alpha|| <= L - 1.
  ChaosExpansion(int L, const BracketTable& table, int base, std::span<const double> x0);

  int L() const noexcept { return L_; }
  const std::vector<MultiIndex>& indices() const noexcept { return indices_; }
  /// T_(alpha)(V)(x0) for each alpha in indices().
  const std::vector<std::vector<double>>& coefficients() const noexcept { return coefficients_; }

  /// R_L(t_k) for all k.
  GridPath remainder_path(const BrownianGrid& grid, const Trajectory& trajectory, const FlowTrajectory& flows) const;

private:
  int L_;
  int base_;
  const BracketTable* table_;
  std::vector<MultiIndex> indices_;
  std::vector<std::vector<double>> coefficients_;
};

/// R_L(t, x, V) at one grid index.
std::vector<double> chaos_remainder(int L, const BracketTable& table, int base, std::size_t t_index,
                                    const FlowTrajectory& flows, const Trajectory& trajectory,
                                    const BrownianGrid& grid);

/// Z_(alpha)(t_k) = K_k T_(alpha)(V)(X_k) for all k.
GridPath appendix_Z(const MultiIndex& alpha, const BracketTable& table, int base, const FlowTrajectory& flows,
                    const Trajectory& trajectory);

/// The same remainder assembled from the exact expansion identity:
/// sum_{|alpha| = L} S(t, Z_alpha) + sum_{||alpha|| >= L, |alpha| <= L-1} T_(alpha)(V)(x0) I(t),
/// with iterated integrals taken in reversed index order as in ChaosExpansion.
/// The table must contain all alpha with |alpha| <= L.
GridPath remainder_by_expansion_identity(int L, const BracketTable& table, int base, const BrownianGrid& grid,
                                         const Trajectory& trajectory, const FlowTrajectory& flows);

/// CSV with header t, X_1..X_d, J_11..J_dd, K_11..K_dd.
void write_flow_csv(std::ostream& out, const Trajectory& trajectory, const FlowTrajectory& flows);

// ---------------------------------------------------------------------------
// Assumption and moment probes

struct ProbeSpec {
  std::vector<double> lo;  // box corners
  std::vector<double> hi;
  std::size_t samples = 2000;
  std::uint64_t seed = 0;
  /// Declared constants; when absent the report is fit-only for that item.
  std::optional<double> L;
  std::optional<double> L1;
  std::optional<int> N;
  std::optional<double> L3;
};

struct AssumptionReport {
  double monotonicity_L = 0.0;        // sup <x-y, b(x)-b(y)>/|x-y|^2 v sup lambda_max(sym grad b)
  std::vector<double> L_by_box;       // same fit on boxes scaled 1, 2, 4 about the centre
  bool non_uniform_monotonicity = false;
  std::vector<double> sup_ratio_by_box;  // sup |b(x1)-b(x2)|^2/|x1-x2|^2 per box
  double growth_slope = 0.0;          // log-log slope of sup_ratio_by_box against the box scale
  int polynomial_N = 1;
  double polynomial_L1 = 0.0;
  double min_drift_quadratic_form = 0.0;  // inf y^T grad b y / |y|^2
  double max_d2b = 0.0;
  double max_dsigma = 0.0;
  double max_d2sigma = 0.0;
  std::optional<bool> pass_M, pass_P, pass_J;
  std::size_t samples = 0;
};

AssumptionReport assumption_probe(const CoefficientSet& c, const ProbeSpec& spec);

struct MomentRow {
  double x0_norm = 0.0;
  double p = 0.0;
  double estimate = 0.0;  // E[sup_k |X_k|^p]
  double std_error = 0.0;
  double ratio = 0.0;     // estimate / (1 + |x0|^p)
  std::size_t paths = 0;
  std::size_t diverged = 0;
  bool finite = true;
};

struct MomentReport {
  std::vector<MomentRow> rows;
  /// Per p: least-squares slope C of estimate against (1 + |x0|^p).
  std::vector<double> fitted_C;
  std::vector<double> p_list;
};

/// x0_list entries are full initial points.
MomentReport moment_probe(const Model& model, const SimConfig& config, std::span<const double> p_list,
                          const std::vector<std::vector<double>>& x0_list, std::size_t paths, int workers);

}  // namespace hypolab::flows
