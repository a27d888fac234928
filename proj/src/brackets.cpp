#include "hypolab/brackets.hpp"

#include "hypolab/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace hypolab::brackets {

using fieldlang::Expression;

int MultiIndex::weight() const noexcept {
  int zeros = 0;
  for (int e : entries_) zeros += e == 0 ? 1 : 0;
  return length() + zeros;
}

int MultiIndex::last() const {
  if (entries_.empty()) throw std::logic_error("last() of the empty multi-index");
  return entries_.back();
}

MultiIndex MultiIndex::prefix() const {
  if (entries_.empty()) throw std::logic_error("prefix() of the empty multi-index");
  return MultiIndex(std::vector<int>(entries_.begin(), entries_.end() - 1));
}

MultiIndex MultiIndex::reversed() const { return MultiIndex(std::vector<int>(entries_.rbegin(), entries_.rend())); }

MultiIndex MultiIndex::appended(int j) const {
  std::vector<int> e = entries_;
  e.push_back(j);
  return MultiIndex(std::move(e));
}

std::string MultiIndex::to_string() const {
  if (entries_.empty()) return "()";
  std::string s = "(";
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(entries_[i]);
  }
  return s + ")";
}

namespace {

void enumerate_length(int length, int m, std::vector<MultiIndex>& out, int max_weight) {
  std::vector<int> e(static_cast<std::size_t>(length), 0);
  for (;;) {
    MultiIndex a(e);
    if (max_weight < 0 || a.weight() <= max_weight) out.push_back(std::move(a));
    int pos = length - 1;
    while (pos >= 0 && e[static_cast<std::size_t>(pos)] == m) {
      e[static_cast<std::size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) return;
    ++e[static_cast<std::size_t>(pos)];
  }
}

}  // namespace

std::vector<MultiIndex> enumerate_indices(int max_weight, int m) {
  if (m < 1) throw std::invalid_argument("m must be >= 1");
  std::vector<MultiIndex> out;
  if (max_weight < 0) return out;
  out.emplace_back();
  // every entry has weight >= 1, so no index longer than max_weight qualifies
  for (int len = 1; len <= max_weight; ++len) enumerate_length(len, m, out, max_weight);
  return out;
}

std::vector<MultiIndex> enumerate_by_length(int max_length, int m) {
  if (m < 1) throw std::invalid_argument("m must be >= 1");
  std::vector<MultiIndex> out;
  if (max_length < 0) return out;
  out.emplace_back();
  for (int len = 1; len <= max_length; ++len) enumerate_length(len, m, out, -1);
  return out;
}

VectorField stratonovich_drift(const CoefficientSet& c) {
  const int d = c.dim();
  std::vector<Expression> correction(static_cast<std::size_t>(d), Expression::constant(0.0));
  for (const auto& col : c.diffusion_columns()) {
    VectorField dd = fieldlang::directional_derivative(col, col);
    for (int j = 0; j < d; ++j) correction[static_cast<std::size_t>(j)] = correction[static_cast<std::size_t>(j)] + dd[static_cast<std::size_t>(j)];
  }
  std::vector<Expression> out;
  out.reserve(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j)
    out.push_back(fieldlang::simplify(c.drift()[static_cast<std::size_t>(j)] -
                                      Expression::constant(0.5) * correction[static_cast<std::size_t>(j)]));
  return VectorField(d, std::move(out));
}

VectorField lie_bracket(const VectorField& v, const VectorField& u) {
  if (v.dim() != u.dim()) throw std::invalid_argument("lie_bracket: dimension mismatch");
  VectorField du_v = fieldlang::directional_derivative(u, v);
  VectorField dv_u = fieldlang::directional_derivative(v, u);
  std::vector<Expression> out;
  out.reserve(static_cast<std::size_t>(v.dim()));
  for (int j = 0; j < v.dim(); ++j)
    out.push_back(fieldlang::simplify(du_v[static_cast<std::size_t>(j)] - dv_u[static_cast<std::size_t>(j)]));
  return VectorField(v.dim(), std::move(out));
}

VectorField bracket_T(const MultiIndex& alpha, const VectorField& v, const CoefficientSet& c) {
  if (alpha.empty()) return v;
  const int j = alpha.last();
  if (j < 0 || j > c.noise_dim()) throw std::invalid_argument("multi-index entry out of range 0..m");
  const VectorField inner = bracket_T(alpha.prefix(), v, c);
  if (j == 0) return lie_bracket(stratonovich_drift(c), inner);
  return lie_bracket(c.diffusion(j - 1), inner);
}

// ---------------------------------------------------------------------------

BracketTable::BracketTable(const CoefficientSet& c, int max_weight, Options options)
    : BracketTable(c, c.diffusion_columns(), max_weight, options) {}

BracketTable::BracketTable(const CoefficientSet& c, std::vector<VectorField> bases, int max_weight, Options options)
    : dim_(c.dim()), noise_dim_(c.noise_dim()), options_(options), bases_(std::move(bases)) {
  for (const auto& b : bases_)
    if (b.dim() != dim_) throw std::invalid_argument("bracket base field has wrong dimension");
  sigmas_.push_back(stratonovich_drift(c));
  for (const auto& col : c.diffusion_columns()) sigmas_.push_back(col);
  extend_to_weight(max_weight);
}

void BracketTable::insert(int base, const MultiIndex& alpha) {
  const auto key = std::make_pair(base, alpha);
  if (entries_.count(key)) return;
  VectorField field;
  if (alpha.empty()) {
    field = fieldlang::simplify(bases_.at(static_cast<std::size_t>(base - 1)));
  } else {
    const int j = alpha.last();
    if (j < 0 || j > noise_dim_) throw std::invalid_argument("multi-index entry out of range 0..m");
    insert(base, alpha.prefix());
    field = lie_bracket(sigmas_[static_cast<std::size_t>(j)], entries_.at({base, alpha.prefix()}).field);
  }
  if (field.size() > options_.size_cap)
    throw InvariantError("bracket T" + alpha.to_string() + " of base " + std::to_string(base) + " has " +
                         std::to_string(field.size()) + " nodes, above the cap of " +
                         std::to_string(options_.size_cap));
  fieldlang::CompiledField compiled(field);
  entries_.emplace(key, Entry{std::move(field), std::move(compiled)});
}

void BracketTable::extend(const MultiIndex& alpha) {
  for (int base = 1; base <= base_count(); ++base) insert(base, alpha);
}

void BracketTable::extend_to_weight(int max_weight) {
  for (const auto& a : enumerate_indices(max_weight, noise_dim_)) extend(a);
  max_weight_ = std::max(max_weight_, max_weight);
}

void BracketTable::extend_to_length(int max_length) {
  for (const auto& a : enumerate_by_length(max_length, noise_dim_)) extend(a);
}

bool BracketTable::contains(const MultiIndex& alpha) const { return entries_.count({1, alpha}) > 0; }

const BracketTable::Entry& BracketTable::entry(int base, const MultiIndex& alpha) const {
  auto it = entries_.find({base, alpha});
  if (it == entries_.end())
    throw std::out_of_range("bracket T" + alpha.to_string() + " of base " + std::to_string(base) + " not in table");
  return it->second;
}

const VectorField& BracketTable::get(int base, const MultiIndex& alpha) const { return entry(base, alpha).field; }

void BracketTable::evaluate(int base, const MultiIndex& alpha, std::span<const double> x, std::span<double> out) const {
  const Entry& e = entry(base, alpha);
  if (!e.compiled.evaluate(x, out)) {
    // Re-run the checked evaluator to name the offending subexpression.
    for (const auto& comp : e.field.components()) fieldlang::evaluate(comp, x);
    throw NonFiniteError(fieldlang::to_string(e.field), "non-finite bracket value");
  }
}

// ---------------------------------------------------------------------------

double smallest_eigenvalue(const Eigen::MatrixXd& m, double psd_tolerance) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw ConvergenceError("symmetric eigen-solver did not converge");
  const double lmin = solver.eigenvalues()(0);
  const double scale = std::max(1.0, m.trace());
  if (lmin < -psd_tolerance * scale)
    throw InvariantError("matrix expected PSD has smallest eigenvalue " + std::to_string(lmin));
  return lmin;
}

Eigen::MatrixXd gram_matrix(std::span<const double> x, int L, const BracketTable& table) {
  if (L < 1) throw std::invalid_argument("L must be >= 1");
  if (static_cast<int>(x.size()) != table.dim()) throw std::invalid_argument("gram_matrix: point has wrong dimension");
  const int d = table.dim();
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd w(d);
  for (const auto& alpha : enumerate_indices(L - 1, table.noise_dim())) {
    for (int k = 1; k <= table.base_count(); ++k) {
      table.evaluate(k, alpha, x, std::span<double>(w.data(), static_cast<std::size_t>(d)));
      m.noalias() += w * w.transpose();
    }
  }
  return m;
}

double v_L(std::span<const double> x, int L, const BracketTable& table) {
  const Eigen::MatrixXd m = gram_matrix(x, L, table);
  return std::clamp(smallest_eigenvalue(m), 0.0, 1.0);
}

std::vector<std::vector<double>> tensor_grid(int dim, double lo, double hi, int n) {
  if (dim < 1 || n < 1) throw std::invalid_argument("tensor_grid: dim and n must be >= 1");
  std::vector<double> axis(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) axis[static_cast<std::size_t>(i)] = n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * i / (n - 1);
  std::vector<std::vector<double>> out;
  std::vector<int> idx(static_cast<std::size_t>(dim), 0);
  for (;;) {
    std::vector<double> p(static_cast<std::size_t>(dim));
    for (int j = 0; j < dim; ++j) p[static_cast<std::size_t>(j)] = axis[static_cast<std::size_t>(idx[static_cast<std::size_t>(j)])];
    out.push_back(std::move(p));
    int j = dim - 1;
    while (j >= 0 && idx[static_cast<std::size_t>(j)] == n - 1) idx[static_cast<std::size_t>(j--)] = 0;
    if (j < 0) break;
    ++idx[static_cast<std::size_t>(j)];
  }
  return out;
}

HormanderReport check_hormander(const std::vector<std::vector<double>>& points, int L, const BracketTable& table,
                                double membership_tolerance) {
  if (points.empty()) throw ConfigError("check_hormander: empty point set");
  if (L < 1) throw ConfigError("check_hormander: L must be >= 1");
  if (table.max_weight() < L - 1)
    throw std::invalid_argument("bracket table covers weight " + std::to_string(table.max_weight()) + " < L-1");
  HormanderReport report;
  report.L = L;
  report.membership_tolerance = membership_tolerance;
  report.inf_by_level.assign(static_cast<std::size_t>(L), std::numeric_limits<double>::infinity());
  for (const auto& x : points) {
    HormanderPoint rec;
    rec.x = x;
    for (int level = 1; level <= L; ++level) {
      const double v = v_L(x, level, table);
      auto& inf = report.inf_by_level[static_cast<std::size_t>(level - 1)];
      inf = std::min(inf, v);
      if (level == L) rec.v_l = v;
    }
    rec.in_u_l = rec.v_l > membership_tolerance;
    report.points.push_back(std::move(rec));
  }
  report.inf_v_l = report.inf_by_level.back();
  for (int level = 1; level <= L; ++level) {
    if (report.inf_by_level[static_cast<std::size_t>(level - 1)] > membership_tolerance) {
      report.l0_candidate = level;
      break;
    }
  }
  report.uh_surrogate = report.inf_v_l > membership_tolerance;
  report.caveat =
      "UH surrogate: infimum taken over " + std::to_string(points.size()) +
      " sampled points only; a finite sample cannot establish the uniform condition on all of R^d";
  return report;
}

// ---------------------------------------------------------------------------

namespace {

double radical_inverse(std::uint64_t index, unsigned base) {
  double result = 0.0;
  double f = 1.0 / base;
  while (index > 0) {
    result += f * static_cast<double>(index % base);
    index /= base;
    f /= base;
  }
  return result;
}

constexpr unsigned kPrimes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53};

// All partial derivatives of `order` of every component, row-major by
// component then multi-index of derivative directions.
std::vector<Expression> derivative_tensor(const VectorField& f, int order) {
  std::vector<Expression> current = f.components();
  for (int o = 0; o < order; ++o) {
    std::vector<Expression> next;
    next.reserve(current.size() * static_cast<std::size_t>(f.dim()));
    for (const auto& e : current)
      for (int i = 1; i <= f.dim(); ++i) next.push_back(fieldlang::differentiate(e, i));
    current = std::move(next);
  }
  return current;
}

void throw_non_finite(const std::vector<Expression>& exprs, std::span<const double> z) {
  for (const auto& e : exprs) fieldlang::evaluate(e, z);
  throw NonFiniteError("<field>", "non-finite value inside the ball");
}

}  // namespace

std::vector<std::vector<double>> ball_points(std::span<const double> center, double radius, std::size_t n) {
  const std::size_t d = center.size();
  if (d == 0 || d > std::size(kPrimes)) throw std::invalid_argument("ball_points: unsupported dimension");
  std::vector<std::vector<double>> out;
  out.reserve(n);
  auto push = [&](std::vector<double> p) {
    if (out.size() < n) out.push_back(std::move(p));
  };
  push(std::vector<double>(center.begin(), center.end()));
  for (std::size_t j = 0; j < d && out.size() < n; ++j) {
    for (double s : {1.0, -1.0}) {
      std::vector<double> p(center.begin(), center.end());
      p[j] += s * radius;
      push(std::move(p));
    }
  }
  for (std::uint64_t index = 1; out.size() < n; ++index) {
    std::vector<double> u(d);
    double norm2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      u[j] = 2.0 * radical_inverse(index, kPrimes[j]) - 1.0;
      norm2 += u[j] * u[j];
    }
    if (norm2 > 1.0) continue;
    for (std::size_t j = 0; j < d; ++j) u[j] = center[j] + radius * u[j];
    push(std::move(u));
  }
  return out;
}

BallNorm ball_sup_norm(std::span<const VectorField> fields, int order, std::span<const double> center, double radius,
                       std::size_t n_ball) {
  if (order < 0) throw std::invalid_argument("ball_sup_norm: order must be >= 0");
  const auto pts = ball_points(center, radius, n_ball);
  BallNorm result;
  result.samples = pts.size();
  for (const auto& f : fields) {
    for (int o = 0; o <= order; ++o) {
      const std::vector<Expression> tensor = derivative_tensor(f, o);
      fieldlang::CompiledField compiled{std::span<const Expression>(tensor)};
      std::vector<double> values(tensor.size());
      for (const auto& z : pts) {
        if (!compiled.evaluate(z, values)) throw_non_finite(tensor, z);
        double s = 0.0;
        for (double v : values) s += v * v;
        result.value = std::max(result.value, std::sqrt(s));
      }
    }
  }
  return result;
}

BallNorm local_M_of_x(std::span<const double> x, const CoefficientSet& c, const LocalNormRequest& request,
                      BracketTable::Options options) {
  if (static_cast<int>(x.size()) != c.dim()) throw std::invalid_argument("local_M_of_x: point has wrong dimension");
  switch (request.variant) {
    case LocalNormVariant::DensityRegion: {
      const auto pts = ball_points(x, request.radius, request.n_ball);
      std::vector<Expression> all = c.drift().components();
      for (const auto& col : c.diffusion_columns())
        all.insert(all.end(), col.components().begin(), col.components().end());
      fieldlang::CompiledField compiled{std::span<const Expression>(all)};
      std::vector<double> values(all.size());
      const std::size_t d = static_cast<std::size_t>(c.dim());
      BallNorm result;
      result.samples = pts.size();
      for (const auto& z : pts) {
        if (!compiled.evaluate(z, values)) throw_non_finite(all, z);
        double b2 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) b2 += values[i] * values[i];
        for (std::size_t i = d; i < values.size(); ++i) s2 += values[i] * values[i];
        result.value = std::max({result.value, std::sqrt(b2), std::sqrt(s2)});
      }
      return result;
    }
    case LocalNormVariant::BracketHierarchy: {
      std::vector<VectorField> bases;
      bases.push_back(stratonovich_drift(c));
      for (const auto& col : c.diffusion_columns()) bases.push_back(col);
      BracketTable table(c, bases, 0, options);
      table.extend_to_length(request.L + 1);
      std::vector<VectorField> fields;
      for (const auto& a : enumerate_by_length(request.L + 1, c.noise_dim()))
        for (int k = 1; k <= table.base_count(); ++k) fields.push_back(table.get(k, a));
      return ball_sup_norm(fields, 2, x, request.radius, request.n_ball);
    }
    case LocalNormVariant::RemainderExpansion: {
      std::vector<VectorField> sigmas;
      sigmas.push_back(stratonovich_drift(c));
      for (const auto& col : c.diffusion_columns()) sigmas.push_back(col);
      BallNorm a = ball_sup_norm(sigmas, 2, x, request.radius, request.n_ball);
      const VectorField v = request.field ? *request.field : c.diffusion(0);
      BracketTable table(c, {v}, 0, options);
      table.extend_to_length(request.L + 1);
      std::vector<VectorField> fields;
      for (const auto& alpha : enumerate_by_length(request.L + 1, c.noise_dim())) fields.push_back(table.get(1, alpha));
      BallNorm b = ball_sup_norm(fields, 0, x, request.radius, request.n_ball);
      return BallNorm{std::max(a.value, b.value), a.samples};
    }
  }
  return {};
}

}  // namespace hypolab::brackets
