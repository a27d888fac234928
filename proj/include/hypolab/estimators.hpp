#pragma once

// Monte Carlo estimators: eigenvalue and remainder tail curves, inverse
// determinant moments, kernel density estimates and envelope fits.

#include "hypolab/brackets.hpp"
#include "hypolab/flows.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hypolab::estimators {

using flows::Model;
using flows::SimConfig;

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
};

/// Wilson score interval; z defaults to the two-sided 95% quantile.
Interval wilson(std::size_t events, std::size_t trials, double z = 1.959963984540054);

/// Paths are streams first_stream .. first_stream + paths - 1 of sim.seed.
struct EnsembleSpec {
  SimConfig sim;
  std::size_t paths = 1000;
  int workers = 1;
  std::uint64_t first_stream = 0;
};

struct TailPoint {
  double K = 1.0;
  std::size_t events = 0;
  std::size_t trials = 0;
  double p_hat = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 1.0;
  double t = 0.0;  // time parameter at which the point was attained
};

/// C exp(-lambda (V^{L+2} K)^mu / (1 + M)^2), fitted in log(-log p) against
/// log K. Descriptive only.
struct EnvelopeShape {
  double C = 1.0;
  double lambda = 0.0;
  double mu = 0.0;
  double residual = 0.0;
  std::size_t points_used = 0;
};

struct TailCurve {
  std::vector<TailPoint> points;
  int L = 1;
  double t = 0.0;  // for remainder curves: the largest t of the dyadic sup grid
  std::vector<double> x0;
  std::string which;
  std::string claim;
  std::size_t diverged = 0;
  /// No event observed at the largest K: only the upper CI bound is informative.
  bool upper_bound_only = false;
  std::optional<EnvelopeShape> fit;
  std::string fit_note;
};

/// Pairwise check: p(K_j) <= p(K_i) + max(half-width_i, half-width_j) for i < j.
bool non_increasing_within_ci(const TailCurve& curve);

/// Quantities entering the envelope shape fit of a tail curve.
struct EnvelopeInputs {
  double V_L = 0.0;
  double M = 0.0;
};

/// Least-squares fit of the envelope shape to the points with 0 < p_hat < C,
/// scanning C >= max p_hat. V_L = 1 and M = 0 when inputs are absent.
void fit_envelope_shape(TailCurve& curve, std::optional<EnvelopeInputs> inputs);

enum class MatrixKind { C, Q };

/// For each K, the event {lambda_min / t^L <= 1 / K} at horizon t / K^{1/(L+1)}.
/// `ensemble.sim.T` is replaced by t; K values share each path (common random
/// numbers). Throws ConfigError for an empty K grid, K < 1 or t outside (0, 1].
TailCurve lambda_tails(const Model& model, int L, std::span<const double> K_grid, double t, MatrixKind which,
                       const EnsembleSpec& ensemble, std::optional<EnvelopeInputs> envelope = std::nullopt);

/// (1 / t^L) int_0^{t/K} |R|^2 ds by the trapezoid rule on grid nodes
/// 0..floor((t/K)/h).
double remainder_statistic(const flows::GridPath& R, double h, double t, double K, int L);

/// sup over t in {2^-1, ..., 2^-7} of P[(1/t^L) int_0^{t/K} |R_L|^2 ds >= K^{-(L+1-eps)}].
/// `ensemble.sim.T` is replaced by 1/2. `base` indexes V among the table's
/// bases; the table must cover ||alpha|| <= L - 1.
TailCurve remainder_tails(const Model& model, const brackets::BracketTable& table, int base, int L, double eps,
                          std::span<const double> K_grid, const EnsembleSpec& ensemble,
                          std::optional<EnvelopeInputs> envelope = std::nullopt);

struct MomentEstimate {
  double p = 1.0;
  double t = 1.0;
  double estimate = 0.0;  // E[(1 / det Q(t))^p]
  double std_error = 0.0;
  std::size_t trials = 0;
  std::size_t nonpositive = 0;  // samples with det Q <= 0
  std::size_t diverged = 0;
  bool heavy_tail = false;      // top 1% of samples carry more than half the sum
  bool valid = true;            // false when nonpositive > 0
};

/// `ensemble.sim.T` is replaced by t.
MomentEstimate inverse_det_moments(const Model& model, double p, double t, const EnsembleSpec& ensemble);

struct MomentScaling {
  std::vector<MomentEstimate> estimates;
  double slope = 0.0;           // log-log slope against t
  double bound_exponent = 0.0;  // -p d L
  double margin = 0.0;
  bool within_bound = false;    // slope >= bound_exponent - margin
};

MomentScaling det_moment_scaling(const Model& model, double p, std::span<const double> t_list, int L,
                                 const EnsembleSpec& ensemble, double margin = 0.05);

/// Axis-aligned tensor grid; the first coordinate varies slowest.
struct GridSpec {
  std::vector<double> lo;
  std::vector<double> hi;
  std::vector<std::size_t> n;

  std::size_t dim() const noexcept { return lo.size(); }
  std::size_t size() const noexcept;
  std::vector<double> point(std::size_t index) const;
  double cell_volume() const;
  void validate() const;
};

struct DensityEstimate {
  GridSpec grid;
  std::vector<double> bandwidth;
  std::vector<double> values;  // p_hat at grid.point(i)
  std::size_t samples = 0;

  /// Riemann sum of values over the grid cells.
  double mass() const;
};

/// Normal-reference bandwidth per coordinate: sd_j (4 / ((d + 2) n))^{1/(d+4)}.
std::vector<double> silverman_bandwidth(const std::vector<std::vector<double>>& samples);

/// Product Gaussian kernel. Throws ConfigError on an empty sample set.
DensityEstimate kde_density(const std::vector<std::vector<double>>& samples, const GridSpec& grid,
                            std::optional<std::vector<double>> bandwidth = std::nullopt);

struct EnvelopeReport {
  std::string label = "fitted constants; the theoretical constants are non-constructive";
  double M = 0.0;
  double t = 0.0;
  int N = 1;
  std::vector<std::size_t> region;  // grid indices inside the validity region with p_hat > 0
  bool empty_region = false;
  double log_K = 0.0;
  double C = 0.0;
  double max_violation = 0.0;  // max over the region of log p_hat - envelope
  double mean_gap = 0.0;
};

/// Tightest envelope log K - C (|x0 - y| ^ 1)^2 / (t (1 + |x0|)^{2N}) lying over
/// log p_hat on the region {y : t <= (|y - x0| ^ 1) / (4 M)}. Among C >= 0 the
/// one with the smallest mean gap is chosen.
EnvelopeReport envelope_check(const DensityEstimate& density, std::span<const double> x0, double t, int N,
                              double M);

/// log K - C u(y) for a fitted report.
double envelope_value(const EnvelopeReport& report, std::span<const double> x0, std::span<const double> y);

/// Header K,events,trials,p_hat,ci_lo,ci_hi.
void write_tail_csv(std::ostream& out, const TailCurve& curve);
/// Header y_1..y_d,p_hat.
void write_density_csv(std::ostream& out, const DensityEstimate& density);
/// Header p,t,estimate,std_error,trials,nonpositive,heavy_tail.
void write_moment_csv(std::ostream& out, std::span<const MomentEstimate> rows);

}  // namespace hypolab::estimators
