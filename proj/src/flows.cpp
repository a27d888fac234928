#include "hypolab/flows.hpp"

#include "hypolab/ensemble.hpp"
#include "hypolab/errors.hpp"
#include "hypolab/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <ostream>

namespace hypolab::flows {

std::string_view scheme_name(Scheme s) noexcept {
  switch (s) {
    case Scheme::TamedEuler: return "tamed-euler";
    case Scheme::SplitStepBackwardEuler: return "split-step-backward-euler";
    case Scheme::Euler: return "euler";
  }
  return "unknown";
}

Scheme parse_scheme(std::string_view name) {
  if (name == "tamed-euler") return Scheme::TamedEuler;
  if (name == "split-step-backward-euler") return Scheme::SplitStepBackwardEuler;
  if (name == "euler") return Scheme::Euler;
  throw ConfigError("unknown scheme '" + std::string(name) +
                    "' (expected tamed-euler, split-step-backward-euler or euler)");
}

void SimConfig::validate() const {
  if (!(T > 0.0) || !std::isfinite(T)) throw ConfigError("T must be a positive finite number");
  if (n_steps == 0 || !std::has_single_bit(n_steps)) throw ConfigError("n_steps must be a power of two");
  if (refine == 0 || !std::has_single_bit(refine) || refine > n_steps)
    throw ConfigError("refine must be a power of two not exceeding n_steps");
  if (x0.empty()) throw ConfigError("x0 is required");
  for (double v : x0)
    if (!std::isfinite(v)) throw ConfigError("x0 entries must be finite");
  if (scheme == Scheme::SplitStepBackwardEuler && monotonicity_L && h() * *monotonicity_L >= 1.0)
    throw ConfigError("split-step requires h * L < 1 (h = " + format_double(h()) +
                      ", L = " + format_double(*monotonicity_L) + ")");
}

// ---------------------------------------------------------------------------
// Brownian grid

BrownianGrid::BrownianGrid(int noise_dim, double T, GridPath W) : noise_dim_(noise_dim), T_(T), W_(std::move(W)) {
  if (noise_dim < 1 || W_.width != static_cast<std::size_t>(noise_dim) || W_.size() < 2)
    throw std::invalid_argument("malformed Brownian grid");
}

namespace {
// Index ranges of the normal stream: level 0 draws the base increments, level
// l >= 1 the midpoints of the l-th bridge refinement.
constexpr std::uint64_t level_offset(int level) { return static_cast<std::uint64_t>(level) << 48; }
}  // namespace

BrownianGrid BrownianGrid::refined(const rng::NormalStream& normals, int level) const {
  const std::size_t n = n_steps();
  const std::size_t m = static_cast<std::size_t>(noise_dim_);
  const double half_sd = 0.5 * std::sqrt(h());
  GridPath fine(m, 2 * n + 1);
  const std::uint64_t base = level_offset(level);
  for (std::size_t k = 0; k <= n; ++k)
    for (std::size_t i = 0; i < m; ++i) fine.values[2 * k * m + i] = W_.values[k * m + i];
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < m; ++i) {
      const double a = W_.values[k * m + i], b = W_.values[(k + 1) * m + i];
      fine.values[(2 * k + 1) * m + i] = 0.5 * (a + b) + half_sd * normals(base + k * m + i);
    }
  return BrownianGrid(noise_dim_, T_, std::move(fine));
}

BrownianGrid BrownianGrid::coarsened() const {
  const std::size_t n = n_steps();
  if (n % 2 != 0 || n < 2) throw std::invalid_argument("coarsening needs an even number of steps");
  const std::size_t m = static_cast<std::size_t>(noise_dim_);
  GridPath coarse(m, n / 2 + 1);
  for (std::size_t k = 0; k <= n / 2; ++k)
    for (std::size_t i = 0; i < m; ++i) coarse.values[k * m + i] = W_.values[2 * k * m + i];
  return BrownianGrid(noise_dim_, T_, std::move(coarse));
}

BrownianGrid sample_brownian(const SimConfig& config, int noise_dim, std::uint64_t stream) {
  const std::size_t base_steps = config.n_steps / config.refine;
  const std::size_t m = static_cast<std::size_t>(noise_dim);
  const double sd = std::sqrt(config.T / static_cast<double>(base_steps));
  rng::NormalStream normals(config.seed, stream);
  GridPath W(m, base_steps + 1);
  std::vector<double> xi(base_steps * m);
  normals.fill(0, xi.size(), xi.data());
  for (std::size_t k = 0; k < base_steps; ++k)
    for (std::size_t i = 0; i < m; ++i) W.values[(k + 1) * m + i] = W.values[k * m + i] + sd * xi[k * m + i];
  BrownianGrid grid(noise_dim, config.T, std::move(W));
  int level = 1;
  for (std::size_t r = config.refine; r > 1; r /= 2) grid = grid.refined(normals, level++);
  return grid;
}

// ---------------------------------------------------------------------------
// Compiled model

namespace {

fieldlang::CompiledField compile_diffusion(const CoefficientSet& c) {
  std::vector<fieldlang::Expression> entries;
  for (int j = 0; j < c.dim(); ++j)
    for (int i = 0; i < c.noise_dim(); ++i) entries.push_back(c.diffusion(i)[static_cast<std::size_t>(j)]);
  return fieldlang::CompiledField(std::span<const fieldlang::Expression>(entries));
}

}  // namespace

Model::Model(const CoefficientSet& c)
    : coefficients_(c),
      dim_(c.dim()),
      noise_dim_(c.noise_dim()),
      drift_(c.drift()),
      drift_jac_(fieldlang::jacobian(c.drift())) {
  columns_.push_back(compile_diffusion(c));
  for (int i = 0; i < noise_dim_; ++i) column_jacs_.emplace_back(fieldlang::jacobian(c.diffusion(i)));
}

bool Model::drift(std::span<const double> x, std::span<double> out) const noexcept { return drift_.evaluate(x, out); }

bool Model::diffusion(std::span<const double> x, std::span<double> out) const noexcept {
  return columns_.front().evaluate(x, out);
}

bool Model::drift_jacobian(std::span<const double> x, std::span<double> out) const noexcept {
  return drift_jac_.evaluate(x, out);
}

bool Model::diffusion_jacobian(int i, std::span<const double> x, std::span<double> out) const noexcept {
  return column_jacs_[static_cast<std::size_t>(i)].evaluate(x, out);
}

// ---------------------------------------------------------------------------
// Small dense helpers (row-major, square d x d unless noted)

namespace {

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// out = a * b
void matmul(const double* a, const double* b, double* out, std::size_t d) {
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += a[i * d + k] * b[k * d + j];
      out[i * d + j] = s;
    }
}

// Solves A x = rhs for `cols` right-hand sides (rhs is d x cols, overwritten).
// Partial pivoting; returns false on a singular pivot.
bool solve(std::vector<double> A, double* rhs, std::size_t d, std::size_t cols) {
  for (std::size_t c = 0; c < d; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < d; ++r)
      if (std::abs(A[r * d + c]) > std::abs(A[p * d + c])) p = r;
    if (A[p * d + c] == 0.0 || !std::isfinite(A[p * d + c])) return false;
    if (p != c) {
      for (std::size_t k = 0; k < d; ++k) std::swap(A[p * d + k], A[c * d + k]);
      for (std::size_t k = 0; k < cols; ++k) std::swap(rhs[p * cols + k], rhs[c * cols + k]);
    }
    for (std::size_t r = c + 1; r < d; ++r) {
      const double f = A[r * d + c] / A[c * d + c];
      if (f == 0.0) continue;
      for (std::size_t k = c; k < d; ++k) A[r * d + k] -= f * A[c * d + k];
      for (std::size_t k = 0; k < cols; ++k) rhs[r * cols + k] -= f * rhs[c * cols + k];
    }
  }
  for (std::size_t c = d; c-- > 0;) {
    for (std::size_t k = 0; k < cols; ++k) {
      double s = rhs[c * cols + k];
      for (std::size_t j = c + 1; j < d; ++j) s -= A[c * d + j] * rhs[j * cols + k];
      rhs[c * cols + k] = s / A[c * d + c];
    }
  }
  return true;
}

void set_identity(std::span<double> m, std::size_t d) {
  std::fill(m.begin(), m.end(), 0.0);
  for (std::size_t i = 0; i < d; ++i) m[i * d + i] = 1.0;
}

[[noreturn]] void diverge(const SimConfig& config, std::size_t step, std::span<const double> x, const char* what) {
  throw DivergenceError(std::string(scheme_name(config.scheme)), step, norm2(x), what);
}

// Damped Newton for y = x + h b(y). Tolerance 1e-12 relative to 1 + |y|.
void backward_euler_stage(const Model& model, std::span<const double> x, double h, std::span<double> y,
                          std::size_t step, const SimConfig& config) {
  const std::size_t d = x.size();
  std::vector<double> b(d), F(d), G(d * d), A(d * d), trial(d), Ft(d);
  auto residual = [&](std::span<const double> z, std::span<double> r) {
    if (!model.drift(z, b)) return false;
    for (std::size_t i = 0; i < d; ++i) r[i] = z[i] - x[i] - h * b[i];
    return all_finite(r);
  };
  std::copy(x.begin(), x.end(), y.begin());
  if (!residual(y, F)) diverge(config, step, y, "newton residual");
  for (int iter = 0; iter < 50; ++iter) {
    const double fn = norm2(F);
    if (fn <= 1e-12 * (1.0 + norm2(y))) return;
    if (!model.drift_jacobian(y, G)) diverge(config, step, y, "newton jacobian");
    for (std::size_t i = 0; i < d * d; ++i) A[i] = -h * G[i];
    for (std::size_t i = 0; i < d; ++i) A[i * d + i] += 1.0;
    std::vector<double> delta(F);
    if (!solve(A, delta.data(), d, 1)) throw ConvergenceError("split-step Newton: singular I - h grad b at step " +
                                                               std::to_string(step));
    double lambda = 1.0;
    bool accepted = false;
    for (int halving = 0; halving < 40; ++halving, lambda *= 0.5) {
      for (std::size_t i = 0; i < d; ++i) trial[i] = y[i] - lambda * delta[i];
      if (residual(trial, Ft) && norm2(Ft) < fn) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    std::copy(trial.begin(), trial.end(), y.begin());
    F = Ft;
  }
  if (norm2(F) <= 1e-12 * (1.0 + norm2(y))) return;
  throw ConvergenceError("split-step Newton did not converge in 50 iterations at step " + std::to_string(step) +
                         " (|F| = " + format_double(norm2(F)) + ")");
}

}  // namespace

Trajectory simulate_x(const Model& model, const SimConfig& config, const BrownianGrid& grid) {
  const std::size_t d = static_cast<std::size_t>(model.dim());
  const std::size_t m = static_cast<std::size_t>(model.noise_dim());
  if (config.x0.size() != d) throw ConfigError("x0 has " + std::to_string(config.x0.size()) + " entries, expected " +
                                               std::to_string(d));
  if (grid.noise_dim() != model.noise_dim()) throw ConfigError("Brownian grid dimension differs from m");
  const std::size_t n = grid.n_steps();
  const double h = grid.h();
  Trajectory tr;
  tr.dim = model.dim();
  tr.h = h;
  tr.X = GridPath(d, n + 1);
  const bool split = config.scheme == Scheme::SplitStepBackwardEuler;
  if (split) tr.stage = GridPath(d, n);
  std::copy(config.x0.begin(), config.x0.end(), tr.X.at(0).begin());
  std::vector<double> b(d), sig(d * m), dw(m), xs(d);
  for (std::size_t k = 0; k < n; ++k) {
    const auto x = tr.X.at(k);
    auto y = tr.X.at(k + 1);
    for (std::size_t i = 0; i < m; ++i) dw[i] = grid.dW(k, static_cast<int>(i));
    std::span<const double> base = x;
    if (split) {
      auto stage = tr.stage.at(k);
      backward_euler_stage(model, x, h, stage, k, config);
      base = stage;
      std::copy(stage.begin(), stage.end(), y.begin());
    } else {
      if (!model.drift(x, b)) diverge(config, k, x, "drift");
      double scale = h;
      if (config.scheme == Scheme::TamedEuler) scale = h / (1.0 + h * norm2(b));
      for (std::size_t j = 0; j < d; ++j) y[j] = x[j] + scale * b[j];
    }
    if (!model.diffusion(base, sig)) diverge(config, k, base, "diffusion");
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += sig[j * m + i] * dw[i];
      y[j] += s;
    }
    if (!all_finite(y)) diverge(config, k + 1, y, "state");
  }
  return tr;
}

FlowTrajectory simulate_flow(const Model& model, const SimConfig& config, const BrownianGrid& grid,
                             const Trajectory& trajectory) {
  const std::size_t d = static_cast<std::size_t>(model.dim());
  const std::size_t m = static_cast<std::size_t>(model.noise_dim());
  const std::size_t n = trajectory.n_steps();
  if (grid.n_steps() != n) throw std::invalid_argument("grid and trajectory lengths differ");
  const double h = trajectory.h;
  const bool split = config.scheme == Scheme::SplitStepBackwardEuler;
  FlowTrajectory fl;
  fl.dim = model.dim();
  fl.J = GridPath(d * d, n + 1);
  fl.K = GridPath(d * d, n + 1);
  set_identity(fl.J.at(0), d);
  set_identity(fl.K.at(0), d);
  const std::size_t dd = d * d;
  std::vector<double> G(dd), S(m * dd), S2(dd), noise(dd), drift_part(dd), tmp(dd), tmp2(dd), dw(m);
  for (std::size_t k = 0; k < n; ++k) {
    std::span<const double> x = split ? trajectory.stage.at(k) : trajectory.X.at(k);
    for (std::size_t i = 0; i < m; ++i) dw[i] = grid.dW(k, static_cast<int>(i));
    if (!model.drift_jacobian(x, G)) diverge(config, k, x, "drift jacobian");
    for (std::size_t i = 0; i < m; ++i)
      if (!model.diffusion_jacobian(static_cast<int>(i), x, std::span<double>(S.data() + i * dd, dd)))
        diverge(config, k, x, "diffusion jacobian");
    // noise = sum_i S_i dW^i, S2 = sum_i S_i S_i
    std::fill(noise.begin(), noise.end(), 0.0);
    std::fill(S2.begin(), S2.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double* Si = S.data() + i * dd;
      for (std::size_t e = 0; e < dd; ++e) noise[e] += Si[e] * dw[i];
      matmul(Si, Si, tmp.data(), d);
      for (std::size_t e = 0; e < dd; ++e) S2[e] += tmp[e];
    }
    const auto J = fl.J.at(k);
    const auto K = fl.K.at(k);
    auto Jn = fl.J.at(k + 1);
    auto Kn = fl.K.at(k + 1);
    if (!split) {
      // J' = J + (h G + noise) J ; K' = K + K (h (S2 - G) - noise)
      for (std::size_t e = 0; e < dd; ++e) tmp[e] = h * G[e] + noise[e];
      matmul(tmp.data(), J.data(), Jn.data(), d);
      for (std::size_t e = 0; e < dd; ++e) Jn[e] += J[e];
      for (std::size_t e = 0; e < dd; ++e) tmp[e] = h * (S2[e] - G[e]) - noise[e];
      matmul(K.data(), tmp.data(), Kn.data(), d);
      for (std::size_t e = 0; e < dd; ++e) Kn[e] += K[e];
    } else {
      // J' = (I + noise) (I - h G)^{-1} J ; K' = K (I - h G) (I - noise + h S2)
      std::vector<double> A(dd);
      for (std::size_t e = 0; e < dd; ++e) A[e] = -h * G[e];
      for (std::size_t i = 0; i < d; ++i) A[i * d + i] += 1.0;
      std::copy(J.begin(), J.end(), tmp.begin());
      if (!solve(A, tmp.data(), d, d)) diverge(config, k, x, "implicit jacobian");
      std::copy(noise.begin(), noise.end(), tmp2.begin());
      for (std::size_t i = 0; i < d; ++i) tmp2[i * d + i] += 1.0;
      matmul(tmp2.data(), tmp.data(), Jn.data(), d);
      matmul(K.data(), A.data(), tmp.data(), d);
      for (std::size_t e = 0; e < dd; ++e) tmp2[e] = h * S2[e] - noise[e];
      for (std::size_t i = 0; i < d; ++i) tmp2[i * d + i] += 1.0;
      matmul(tmp.data(), tmp2.data(), Kn.data(), d);
    }
    if (!all_finite(Jn) || !all_finite(Kn)) diverge(config, k + 1, trajectory.X.at(k + 1), "flow");
  }
  return fl;
}

// ---------------------------------------------------------------------------
// Malliavin calculus

namespace {

Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> as_matrix(
    std::span<const double> v, std::size_t rows, std::size_t cols) {
  return {v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

Eigen::MatrixXd diffusion_at(const Model& model, std::span<const double> x) {
  const std::size_t d = static_cast<std::size_t>(model.dim()), m = static_cast<std::size_t>(model.noise_dim());
  std::vector<double> sig(d * m);
  if (!model.diffusion(x, sig)) throw DivergenceError("n/a", 0, norm2(x), "diffusion evaluation");
  return as_matrix(sig, d, m);
}

}  // namespace

Eigen::MatrixXd malliavin_derivative(std::size_t s_index, std::size_t t_index, const FlowTrajectory& flows,
                                     const Trajectory& trajectory, const Model& model) {
  if (s_index > t_index) throw std::invalid_argument("malliavin_derivative needs s <= t");
  if (t_index >= trajectory.X.size()) throw std::out_of_range("time index beyond the trajectory");
  const std::size_t d = static_cast<std::size_t>(model.dim());
  const Eigen::MatrixXd sig = diffusion_at(model, trajectory.X.at(s_index));
  if (s_index == t_index) return sig;
  const Eigen::MatrixXd J = as_matrix(flows.J.at(t_index), d, d);
  const Eigen::MatrixXd K = as_matrix(flows.K.at(s_index), d, d);
  return J * (K * sig);
}

namespace {

// C(t_k) for k = 0..last into rows of `out` (or only the final value when
// `out` has a single row).
void accumulate_C(const FlowTrajectory& flows, const Trajectory& trajectory, const Model& model, std::size_t last,
                  GridPath& out) {
  const std::size_t d = static_cast<std::size_t>(model.dim()), m = static_cast<std::size_t>(model.noise_dim());
  const double h = trajectory.h;
  const bool all_rows = out.size() > 1;
  std::vector<double> sig(d * m), v(d * m), acc(d * d, 0.0);
  for (std::size_t k = 0; k < last; ++k) {
    const auto x = trajectory.X.at(k);
    if (!model.diffusion(x, sig)) throw DivergenceError("n/a", k, norm2(x), "diffusion evaluation");
    const auto K = flows.K.at(k);
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t l = 0; l < d; ++l) s += K[j * d + l] * sig[l * m + i];
        v[j * m + i] = s;
      }
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += v[a * m + i] * v[b * m + i];
        acc[a * d + b] += h * s;
        acc[b * d + a] = acc[a * d + b];
      }
    if (all_rows) std::copy(acc.begin(), acc.end(), out.at(k + 1).begin());
  }
  if (!all_rows) std::copy(acc.begin(), acc.end(), out.at(0).begin());
}

}  // namespace

GridPath malliavin_C_path(const FlowTrajectory& flows, const Trajectory& trajectory, const Model& model) {
  const std::size_t d = static_cast<std::size_t>(model.dim());
  GridPath C(d * d, trajectory.X.size());
  accumulate_C(flows, trajectory, model, trajectory.n_steps(), C);
  return C;
}

GridPath malliavin_Q_path(const FlowTrajectory& flows, const GridPath& C_path) {
  const std::size_t d = static_cast<std::size_t>(flows.dim), dd = d * d;
  GridPath Q(dd, C_path.size());
  std::vector<double> tmp(dd), q(dd), Jt(dd);
  for (std::size_t k = 0; k < C_path.size(); ++k) {
    const auto J = flows.J.at(k);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) Jt[i * d + j] = J[j * d + i];
    matmul(J.data(), C_path.at(k).data(), tmp.data(), d);
    matmul(tmp.data(), Jt.data(), q.data(), d);
    auto out = Q.at(k);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] = 0.5 * (q[i * d + j] + q[j * d + i]);
  }
  return Q;
}

MalliavinPair malliavin_matrices(const FlowTrajectory& flows, const Trajectory& trajectory, const Model& model,
                                 std::size_t t_index) {
  if (t_index >= trajectory.X.size()) throw std::out_of_range("time index beyond the trajectory");
  const std::size_t d = static_cast<std::size_t>(model.dim());
  GridPath C(d * d, 1);
  accumulate_C(flows, trajectory, model, t_index, C);
  MalliavinPair out;
  out.C = as_matrix(C.at(0), d, d);
  const Eigen::MatrixXd J = as_matrix(flows.J.at(t_index), d, d);
  const Eigen::MatrixXd Q = J * out.C * J.transpose();
  out.Q = 0.5 * (Q + Q.transpose());
  return out;
}

// ---------------------------------------------------------------------------
// Iterated integrals and the chaos remainder

GridPath iterated_integral(const MultiIndex& alpha, const BrownianGrid& grid, const GridPath* Z) {
  const std::size_t n = grid.n_steps();
  GridPath f;
  if (Z) {
    if (Z->size() != n + 1) throw std::invalid_argument("integrand length differs from the grid");
    f = *Z;
  } else {
    f = GridPath(1, n + 1);
    std::fill(f.values.begin(), f.values.end(), 1.0);
  }
  const std::size_t w = f.width;
  const double h = grid.h();
  for (int j : alpha.entries()) {
    if (j < 0 || j > grid.noise_dim())
      throw ConfigError("multi-index entry " + std::to_string(j) + " outside 0.." + std::to_string(grid.noise_dim()));
    GridPath g(w, n + 1);
    for (std::size_t k = 0; k < n; ++k) {
      const double inc = j == 0 ? h : grid.dW(k, j - 1);
      for (std::size_t c = 0; c < w; ++c)
        g.values[(k + 1) * w + c] = g.values[k * w + c] + 0.5 * (f.values[k * w + c] + f.values[(k + 1) * w + c]) * inc;
    }
    f = std::move(g);
  }
  return f;
}

ChaosExpansion::ChaosExpansion(int L, const BracketTable& table, int base, std::span<const double> x0)
    : L_(L), base_(base), table_(&table) {
  if (L < 1) throw ConfigError("expansion order L must be >= 1");
  indices_ = brackets::enumerate_indices(L - 1, table.noise_dim());
  const std::size_t d = static_cast<std::size_t>(table.dim());
  for (const auto& a : indices_) {
    std::vector<double> v(d);
    table.evaluate(base, a, x0, v);
    coefficients_.push_back(std::move(v));
  }
}

namespace {

bool all_zero(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

// K_k f(X_k) for a field looked up in the table.
GridPath pulled_back(const BracketTable& table, int base, const MultiIndex& alpha, const FlowTrajectory& flows,
                     const Trajectory& trajectory) {
  const std::size_t d = static_cast<std::size_t>(table.dim());
  const std::size_t n1 = trajectory.X.size();
  GridPath out(d, n1);
  std::vector<double> v(d);
  for (std::size_t k = 0; k < n1; ++k) {
    table.evaluate(base, alpha, trajectory.X.at(k), v);
    const auto K = flows.K.at(k);
    auto o = out.at(k);
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < d; ++l) s += K[j * d + l] * v[l];
      o[j] = s;
    }
  }
  return out;
}

bool field_is_zero(const VectorField& v) {
  return std::all_of(v.components().begin(), v.components().end(),
                     [](const fieldlang::Expression& e) { return e.is_constant(0.0); });
}

}  // namespace

GridPath ChaosExpansion::remainder_path(const BrownianGrid& grid, const Trajectory& trajectory,
                                        const FlowTrajectory& flows) const {
  GridPath R = pulled_back(*table_, base_, MultiIndex{}, flows, trajectory);
  const std::size_t d = R.width;
  for (std::size_t a = 0; a < indices_.size(); ++a) {
    const auto& c = coefficients_[a];
    if (all_zero(c)) continue;
    const GridPath I = iterated_integral(indices_[a].reversed(), grid);
    for (std::size_t k = 0; k < R.size(); ++k)
      for (std::size_t j = 0; j < d; ++j) R.values[k * d + j] -= c[j] * I.values[k];
  }
  return R;
}

std::vector<double> chaos_remainder(int L, const BracketTable& table, int base, std::size_t t_index,
                                    const FlowTrajectory& flows, const Trajectory& trajectory,
                                    const BrownianGrid& grid) {
  ChaosExpansion e(L, table, base, trajectory.X.at(0));
  const GridPath R = e.remainder_path(grid, trajectory, flows);
  const auto row = R.at(t_index);
  return {row.begin(), row.end()};
}

GridPath appendix_Z(const MultiIndex& alpha, const BracketTable& table, int base, const FlowTrajectory& flows,
                    const Trajectory& trajectory) {
  return pulled_back(table, base, alpha, flows, trajectory);
}

GridPath remainder_by_expansion_identity(int L, const BracketTable& table, int base, const BrownianGrid& grid,
                                         const Trajectory& trajectory, const FlowTrajectory& flows) {
  const std::size_t d = static_cast<std::size_t>(table.dim());
  const std::size_t n1 = trajectory.X.size();
  GridPath out(d, n1);
  std::vector<double> c(d);
  for (const auto& a : brackets::enumerate_by_length(L, table.noise_dim())) {
    if (a.length() == L) {
      if (field_is_zero(table.get(base, a))) continue;
      const GridPath Z = appendix_Z(a, table, base, flows, trajectory);
      const GridPath S = iterated_integral(a.reversed(), grid, &Z);
      for (std::size_t e = 0; e < out.values.size(); ++e) out.values[e] += S.values[e];
    } else if (a.weight() >= L) {
      table.evaluate(base, a, trajectory.X.at(0), c);
      if (all_zero(c)) continue;
      const GridPath I = iterated_integral(a.reversed(), grid);
      for (std::size_t k = 0; k < n1; ++k)
        for (std::size_t j = 0; j < d; ++j) out.values[k * d + j] += c[j] * I.values[k];
    }
  }
  return out;
}

void write_flow_csv(std::ostream& out, const Trajectory& trajectory, const FlowTrajectory& flows) {
  const int d = trajectory.dim;
  out << "t";
  for (int j = 1; j <= d; ++j) out << ",X_" << j;
  for (const char* name : {"J", "K"})
    for (int a = 1; a <= d; ++a)
      for (int b = 1; b <= d; ++b) out << ',' << name << '_' << a << b;
  out << '\n';
  for (std::size_t k = 0; k < trajectory.X.size(); ++k) {
    out << format_double(trajectory.t(k));
    for (double v : trajectory.X.at(k)) out << ',' << format_double(v);
    for (double v : flows.J.at(k)) out << ',' << format_double(v);
    for (double v : flows.K.at(k)) out << ',' << format_double(v);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Probes

namespace {

double sym_eigen_extreme(const std::vector<double>& G, std::size_t d, bool largest) {
  Eigen::MatrixXd A = as_matrix(G, d, d);
  const Eigen::MatrixXd S = 0.5 * (A + A.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw ConvergenceError("eigen-solver failed in assumption probe");
  return largest ? es.eigenvalues()(static_cast<Eigen::Index>(d) - 1) : es.eigenvalues()(0);
}

std::vector<std::vector<double>> box_samples(const std::vector<double>& lo, const std::vector<double>& hi, double scale,
                                             std::size_t n, std::uint64_t seed, std::uint64_t stream) {
  const std::size_t d = lo.size();
  rng::UniformStream u(seed, stream);
  std::vector<std::vector<double>> pts(n, std::vector<double>(d));
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = 0.5 * (lo[j] + hi[j]), r = 0.5 * (hi[j] - lo[j]) * scale;
      pts[s][j] = c - r + 2.0 * r * u(s * d + j);
    }
  return pts;
}

double frobenius_max(const fieldlang::CompiledField& f, const std::vector<std::vector<double>>& pts) {
  std::vector<double> out(f.size());
  double best = 0.0;
  for (const auto& p : pts) {
    if (!f.evaluate(p, out)) throw NonFiniteError("derivative field", "non-finite value in the probe box");
    best = std::max(best, norm2(out));
  }
  return best;
}

}  // namespace

AssumptionReport assumption_probe(const CoefficientSet& c, const ProbeSpec& spec) {
  const std::size_t d = static_cast<std::size_t>(c.dim());
  if (spec.lo.size() != d || spec.hi.size() != d) throw ConfigError("probe box must have d coordinates per corner");
  for (std::size_t j = 0; j < d; ++j)
    if (!(spec.hi[j] > spec.lo[j])) throw ConfigError("probe box needs hi > lo in every coordinate");
  if (spec.samples < 2) throw ConfigError("probe needs at least 2 samples");

  const Model model(c);
  AssumptionReport rep;
  rep.samples = spec.samples;
  std::vector<double> b1(d), b2(d), G(d * d);
  std::vector<double> centre(d);
  for (std::size_t j = 0; j < d; ++j) centre[j] = 0.5 * (spec.lo[j] + spec.hi[j]);

  struct Pair {
    std::vector<double> x1, x2;
    double ratio;  // |b(x1) - b(x2)|^2 / |x1 - x2|^2
  };
  std::vector<Pair> widest;
  rep.min_drift_quadratic_form = std::numeric_limits<double>::infinity();
  const double scales[] = {1.0, 2.0, 4.0};
  for (int s = 0; s < 3; ++s) {
    auto a = box_samples(spec.lo, spec.hi, scales[s], spec.samples, spec.seed, 0);
    auto b = box_samples(spec.lo, spec.hi, scales[s], spec.samples, spec.seed, 1);
    a.push_back(centre);
    double L = -std::numeric_limits<double>::infinity();
    double sup_ratio = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!model.drift_jacobian(a[i], G)) throw NonFiniteError("grad b", "non-finite value in the probe box");
      L = std::max(L, sym_eigen_extreme(G, d, true));
      if (s == 0) rep.min_drift_quadratic_form = std::min(rep.min_drift_quadratic_form, sym_eigen_extreme(G, d, false));
      if (i >= b.size()) continue;
      if (!model.drift(a[i], b1) || !model.drift(b[i], b2)) throw NonFiniteError("b", "non-finite value in the probe box");
      double dot = 0.0, dx2 = 0.0, db2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double dx = a[i][j] - b[i][j], db = b1[j] - b2[j];
        dot += dx * db;
        dx2 += dx * dx;
        db2 += db * db;
      }
      if (dx2 == 0.0) continue;
      L = std::max(L, dot / dx2);
      sup_ratio = std::max(sup_ratio, db2 / dx2);
      if (s == 2) widest.push_back({a[i], b[i], db2 / dx2});
    }
    rep.L_by_box.push_back(L);
    rep.sup_ratio_by_box.push_back(sup_ratio);
  }
  rep.monotonicity_L = rep.L_by_box[0];
  rep.non_uniform_monotonicity = rep.L_by_box[2] > rep.L_by_box[0] + 0.1 * std::max(1.0, std::abs(rep.L_by_box[0]));

  // Growth exponent: log-log slope of the sup Lipschitz ratio against the box
  // scale. The same uniforms are reused at every scale, so the three sups are
  // taken over exactly rescaled point sets.
  {
    double mx = 0, my = 0;
    std::vector<std::pair<double, double>> pts;
    for (int s = 0; s < 3; ++s)
      if (rep.sup_ratio_by_box[static_cast<std::size_t>(s)] > 0.0)
        pts.emplace_back(std::log(scales[s]), std::log(rep.sup_ratio_by_box[static_cast<std::size_t>(s)]));
    if (pts.size() >= 2) {
      for (auto& [x, y] : pts) mx += x, my += y;
      mx /= static_cast<double>(pts.size());
      my /= static_cast<double>(pts.size());
      double sxy = 0, sxx = 0;
      for (auto& [x, y] : pts) sxy += (x - mx) * (y - my), sxx += (x - mx) * (x - mx);
      rep.growth_slope = sxy / sxx;
    }
  }
  rep.polynomial_N = spec.N ? *spec.N : std::max(1, static_cast<int>(std::ceil(rep.growth_slope / 2.0 - 0.25)) + 1);
  const double e = 2.0 * rep.polynomial_N - 2.0;
  for (const auto& p : widest)
    rep.polynomial_L1 =
        std::max(rep.polynomial_L1, p.ratio / (1.0 + std::pow(norm2(p.x1), e) + std::pow(norm2(p.x2), e)));

  // Derivative bounds for C on the base box.
  auto pts0 = box_samples(spec.lo, spec.hi, 1.0, spec.samples, spec.seed, 2);
  pts0.push_back(centre);
  const auto jb = fieldlang::jacobian(c.drift());
  std::vector<fieldlang::Expression> hess;
  for (const auto& entry : jb.entries)
    for (std::size_t l = 1; l <= d; ++l) hess.push_back(fieldlang::differentiate(entry, static_cast<int>(l)));
  rep.max_d2b = frobenius_max(fieldlang::CompiledField(std::span<const fieldlang::Expression>(hess)), pts0);
  std::vector<fieldlang::Expression> ds, d2s;
  for (int i = 0; i < c.noise_dim(); ++i) {
    const auto js = fieldlang::jacobian(c.diffusion(i));
    for (const auto& entry : js.entries) {
      ds.push_back(entry);
      for (std::size_t l = 1; l <= d; ++l) d2s.push_back(fieldlang::differentiate(entry, static_cast<int>(l)));
    }
  }
  rep.max_dsigma = frobenius_max(fieldlang::CompiledField(std::span<const fieldlang::Expression>(ds)), pts0);
  rep.max_d2sigma = frobenius_max(fieldlang::CompiledField(std::span<const fieldlang::Expression>(d2s)), pts0);

  if (spec.L) rep.pass_M = rep.monotonicity_L <= *spec.L;
  if (spec.L1) rep.pass_P = rep.polynomial_L1 <= *spec.L1;
  if (spec.L3) rep.pass_J = rep.min_drift_quadratic_form > -*spec.L3;
  return rep;
}

MomentReport moment_probe(const Model& model, const SimConfig& config, std::span<const double> p_list,
                          const std::vector<std::vector<double>>& x0_list, std::size_t paths, int workers) {
  if (p_list.empty()) throw ConfigError("moment probe needs a non-empty p list");
  if (x0_list.empty()) throw ConfigError("moment probe needs a non-empty x0 list");
  if (paths == 0) throw ConfigError("moment probe needs paths >= 1");
  MomentReport rep;
  rep.p_list.assign(p_list.begin(), p_list.end());
  for (const auto& x0 : x0_list) {
    SimConfig cfg = config;
    cfg.x0 = x0;
    cfg.validate();
    // sup_k |X_k| per path, or NaN for a diverged path
    auto sups = parallel_map(paths, workers, [&](std::size_t i) {
      const BrownianGrid grid = sample_brownian(cfg, model.noise_dim(), i);
      try {
        const Trajectory tr = simulate_x(model, cfg, grid);
        double s = 0.0;
        for (std::size_t k = 0; k < tr.X.size(); ++k) s = std::max(s, norm2(tr.X.at(k)));
        return s;
      } catch (const DivergenceError&) {
        return std::numeric_limits<double>::quiet_NaN();
      }
    });
    const double r0 = norm2(x0);
    for (double p : p_list) {
      MomentRow row;
      row.x0_norm = r0;
      row.p = p;
      row.paths = paths;
      double sum = 0.0, sum2 = 0.0;
      for (double s : sups) {
        if (std::isnan(s)) {
          ++row.diverged;
          continue;
        }
        const double v = std::pow(s, p);
        sum += v;
        sum2 += v * v;
      }
      const double n = static_cast<double>(paths);
      if (row.diverged > 0 || !std::isfinite(sum)) {
        row.finite = false;
        row.estimate = std::numeric_limits<double>::infinity();
      } else {
        row.estimate = sum / n;
        const double var = paths > 1 ? std::max(0.0, (sum2 - n * row.estimate * row.estimate) / (n - 1.0)) : 0.0;
        row.std_error = std::sqrt(var / n);
      }
      row.ratio = row.estimate / (1.0 + std::pow(r0, p));
      rep.rows.push_back(row);
    }
  }
  // Per p: least-squares slope of estimate against 1 + |x0|^p (with
  // intercept when at least two distinct abscissae exist).
  for (double p : p_list) {
    std::vector<std::pair<double, double>> xy;
    bool finite = true;
    for (const auto& r : rep.rows) {
      if (r.p != p) continue;
      finite = finite && r.finite;
      xy.emplace_back(1.0 + std::pow(r.x0_norm, p), r.estimate);
    }
    if (!finite) {
      rep.fitted_C.push_back(std::numeric_limits<double>::infinity());
      continue;
    }
    double mx = 0, my = 0;
    for (auto& [x, y] : xy) mx += x, my += y;
    mx /= static_cast<double>(xy.size());
    my /= static_cast<double>(xy.size());
    double sxy = 0, sxx = 0, num = 0, den = 0;
    for (auto& [x, y] : xy) {
      sxy += (x - mx) * (y - my);
      sxx += (x - mx) * (x - mx);
      num += x * y;
      den += x * x;
    }
    rep.fitted_C.push_back(sxx > 0 ? sxy / sxx : num / den);
  }
  return rep;
}

}  // namespace hypolab::flows
