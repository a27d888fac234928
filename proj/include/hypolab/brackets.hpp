#pragma once

// Lie-bracket machinery: the Stratonovich-corrected drift, multi-indices, the
// bracket hierarchy T_(alpha)(V), the Gram matrix whose capped smallest
// eigenvalue is V_L(x), Hormander reports and local sup-norms on unit balls.

#include "hypolab/fieldlang.hpp"

#include <Eigen/Dense>

#include <compare>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hypolab::brackets {

using fieldlang::CoefficientSet;
using fieldlang::VectorField;

/// Element of {empty} u {0..m}^i. Entry 0 denotes the drift direction.
class MultiIndex {
public:
  MultiIndex() = default;
  explicit MultiIndex(std::vector<int> entries) : entries_(std::move(entries)) {}
  MultiIndex(std::initializer_list<int> entries) : entries_(entries) {}

  const std::vector<int>& entries() const noexcept { return entries_; }
  bool empty() const noexcept { return entries_.empty(); }
  /// |alpha|
  int length() const noexcept { return static_cast<int>(entries_.size()); }
  /// ||alpha|| = |alpha| + number of zero entries
  int weight() const noexcept;
  /// alpha_*, the last entry. Requires non-empty.
  int last() const;
  /// alpha', alpha with its last entry removed. Requires non-empty.
  MultiIndex prefix() const;
  MultiIndex reversed() const;
  MultiIndex appended(int j) const;

  std::string to_string() const;

  auto operator<=>(const MultiIndex&) const = default;

private:
  std::vector<int> entries_;
};

/// All alpha with ||alpha|| <= max_weight and entries in {0..m}, sorted by
/// (|alpha|, lexicographic). Includes the empty index.
std::vector<MultiIndex> enumerate_indices(int max_weight, int m);

/// All alpha with |alpha| <= max_length, same ordering.
std::vector<MultiIndex> enumerate_by_length(int max_length, int m);

/// sigma^0 = b - 1/2 sum_i (d sigma^i) sigma^i.
VectorField stratonovich_drift(const CoefficientSet& c);

/// [v, u] = (du) v - (dv) u, simplified.
VectorField lie_bracket(const VectorField& v, const VectorField& u);

/// T_(alpha)(v) computed directly (no memoization).
VectorField bracket_T(const MultiIndex& alpha, const VectorField& v, const CoefficientSet& c);

/// Memoized table of T_(alpha)(V) for a list of base fields V.
///
/// Construction and extend() are single-writer; once built, lookups and
/// evaluations are const and may run concurrently.
struct BracketTableOptions {
  std::size_t size_cap = 100000;  // max AST nodes for any single bracket field
};

class BracketTable {
public:
  using Options = BracketTableOptions;

  /// Bases sigma^1..sigma^m, all alpha with ||alpha|| <= max_weight.
  BracketTable(const CoefficientSet& c, int max_weight, Options options);
  BracketTable(const CoefficientSet& c, int max_weight) : BracketTable(c, max_weight, Options{}) {}
  /// Arbitrary bases (e.g. a user field V, or sigma^0..sigma^m).
  BracketTable(const CoefficientSet& c, std::vector<VectorField> bases, int max_weight, Options options = {});

  int dim() const noexcept { return dim_; }
  int noise_dim() const noexcept { return noise_dim_; }
  int base_count() const noexcept { return static_cast<int>(bases_.size()); }
  int max_weight() const noexcept { return max_weight_; }

  /// sigma^j, j in 0..m (j = 0 is the Stratonovich drift).
  const VectorField& sigma(int j) const { return sigmas_.at(static_cast<std::size_t>(j)); }

  /// Adds T_(alpha) and all its prefixes for every base.
  void extend(const MultiIndex& alpha);
  void extend_to_weight(int max_weight);
  void extend_to_length(int max_length);

  bool contains(const MultiIndex& alpha) const;
  /// base is 1-based (base 1 = first base field). Throws if alpha is missing.
  const VectorField& get(int base, const MultiIndex& alpha) const;
  /// Evaluates get(base, alpha) at x into out (length dim()).
  void evaluate(int base, const MultiIndex& alpha, std::span<const double> x, std::span<double> out) const;

private:
  struct Entry {
    VectorField field;
    fieldlang::CompiledField compiled;
  };
  const Entry& entry(int base, const MultiIndex& alpha) const;
  void insert(int base, const MultiIndex& alpha);

  int dim_;
  int noise_dim_;
  int max_weight_ = 0;
  Options options_;
  std::vector<VectorField> sigmas_;
  std::vector<VectorField> bases_;
  std::map<std::pair<int, MultiIndex>, Entry> entries_;
};

/// M_L(x) = sum_k sum_{||alpha|| <= L-1} w w^T, w = T_(alpha)(sigma^k)(x).
Eigen::MatrixXd gram_matrix(std::span<const double> x, int L, const BracketTable& table);

/// V_L(x) = min(lambda_min(M_L(x)), 1).
double v_L(std::span<const double> x, int L, const BracketTable& table);

/// Smallest eigenvalue of a symmetric PSD matrix; throws ConvergenceError on
/// solver failure and InvariantError if lambda_min < -psd_tolerance.
double smallest_eigenvalue(const Eigen::MatrixXd& m, double psd_tolerance = 1e-10);

struct HormanderPoint {
  std::vector<double> x;
  double v_l = 0.0;
  bool in_u_l = false;
};

struct HormanderReport {
  int L = 1;
  std::vector<HormanderPoint> points;
  /// inf over the point set of V_{L'} for L' = 1..L (index L'-1).
  std::vector<double> inf_by_level;
  double inf_v_l = 0.0;
  /// Smallest L' <= L whose inf exceeds the membership tolerance.
  std::optional<int> l0_candidate;
  bool uh_surrogate = false;
  double membership_tolerance = 1e-12;
  std::string caveat;
};

/// Tensor grid with n points per axis on [lo, hi]^d (n = 1 gives the midpoint).
std::vector<std::vector<double>> tensor_grid(int dim, double lo, double hi, int n);

/// Evaluates V_{L'} for L' <= L at every point. Throws ConfigError on an empty
/// point set.
HormanderReport check_hormander(const std::vector<std::vector<double>>& points, int L, const BracketTable& table,
                                double membership_tolerance = 1e-12);

// ---------------------------------------------------------------------------
// Local sup-norms on B(x, radius)

struct BallNorm {
  double value = 0.0;
  std::size_t samples = 0;
};

/// Deterministic nested point set in the closed ball: centre, the 2d axis
/// extremes, then Halton points accepted inside the ball. The first n points
/// of a larger request equal a smaller request, so sups are monotone in n.
std::vector<std::vector<double>> ball_points(std::span<const double> center, double radius, std::size_t n);

/// max_{0 <= i <= order} sup_{z in ball} |d^i f(z)| (Frobenius norm of the
/// i-th derivative tensor), maximised over `fields`. Throws NonFiniteError if
/// any field value in the ball is not finite.
BallNorm ball_sup_norm(std::span<const VectorField> fields, int order, std::span<const double> center,
                       double radius, std::size_t n_ball);

enum class LocalNormVariant {
  /// max ||sigma^i||_{C^2_b} (i = 0..m) v max ||T_(alpha)(V)||_{C^0_b}, |alpha| <= L+1
  RemainderExpansion,
  /// max ||T_(alpha)(sigma^k)||_{C^2_b}, k = 0..m, |alpha| <= L+1
  BracketHierarchy,
  /// sup ||sigma(z)|| v |b(z)|
  DensityRegion,
};

struct LocalNormRequest {
  LocalNormVariant variant = LocalNormVariant::DensityRegion;
  int L = 1;
  double radius = 1.0;
  std::size_t n_ball = 512;
  std::optional<VectorField> field;  // V for RemainderExpansion (defaults to sigma^1)
};

BallNorm local_M_of_x(std::span<const double> x, const CoefficientSet& c, const LocalNormRequest& request,
                      BracketTable::Options options = {});

}  // namespace hypolab::brackets
