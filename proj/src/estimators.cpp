#include "hypolab/estimators.hpp"

#include "hypolab/ensemble.hpp"
#include "hypolab/errors.hpp"
#include "hypolab/io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>

namespace hypolab::estimators {

Interval wilson(std::size_t events, std::size_t trials, double z) {
  if (trials == 0) return {0.0, 1.0};
  if (events > trials) throw std::invalid_argument("events exceed trials");
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(events) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double centre = (p + z2 / (2 * n)) / denom;
  const double half = z * std::sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom;
  Interval iv{std::max(0.0, centre - half), std::min(1.0, centre + half)};
  // keep p inside the interval despite rounding at the extremes
  iv.lo = std::min(iv.lo, p);
  iv.hi = std::max(iv.hi, p);
  return iv;
}

bool non_increasing_within_ci(const TailCurve& curve) {
  const auto& pts = curve.points;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      const double hw = std::max(pts[i].ci_hi - pts[i].ci_lo, pts[j].ci_hi - pts[j].ci_lo) / 2.0;
      if (pts[j].p_hat > pts[i].p_hat + hw) return false;
    }
  return true;
}

namespace {

void check_K_grid(std::span<const double> K_grid) {
  if (K_grid.empty()) throw ConfigError("K grid must not be empty");
  for (double K : K_grid)
    if (!(K >= 1.0) || !std::isfinite(K)) throw ConfigError("K grid entries must be finite and >= 1");
}

// Floor of s / h, robust to s landing on a node up to rounding.
std::size_t node_index(double s, double h, std::size_t n) {
  const double q = s / h;
  auto k = static_cast<std::size_t>(std::floor(q + 1e-9 * std::max(1.0, q)));
  return std::min(k, n);
}

TailPoint make_point(double K, std::size_t events, std::size_t trials, double t) {
  TailPoint p;
  p.K = K;
  p.events = events;
  p.trials = trials;
  p.p_hat = trials ? static_cast<double>(events) / static_cast<double>(trials) : 0.0;
  const Interval iv = wilson(events, trials);
  p.ci_lo = iv.lo;
  p.ci_hi = iv.hi;
  p.t = t;
  return p;
}

std::optional<EnvelopeShape> fit_at(const TailCurve& curve, double C, double offset, double M) {
  std::vector<std::pair<double, double>> xy;
  for (const auto& p : curve.points)
    if (p.p_hat > 0.0 && p.p_hat < C) xy.emplace_back(std::log(p.K) + offset, std::log(-std::log(p.p_hat / C)));
  if (xy.size() < 2) return std::nullopt;
  double mx = 0, my = 0;
  for (auto& [x, y] : xy) mx += x, my += y;
  mx /= static_cast<double>(xy.size());
  my /= static_cast<double>(xy.size());
  double sxy = 0, sxx = 0;
  for (auto& [x, y] : xy) sxy += (x - mx) * (y - my), sxx += (x - mx) * (x - mx);
  if (sxx <= 0) return std::nullopt;
  const double mu = sxy / sxx, a = my - mu * mx;
  EnvelopeShape s;
  s.C = C;
  s.mu = mu;
  s.lambda = std::exp(a) * (1.0 + M) * (1.0 + M);
  for (auto& [x, y] : xy) s.residual += (y - a - mu * x) * (y - a - mu * x);
  s.points_used = xy.size();
  return s;
}

}  // namespace

void fit_envelope_shape(TailCurve& curve, std::optional<EnvelopeInputs> inputs) {
  curve.fit.reset();
  const EnvelopeInputs in = inputs.value_or(EnvelopeInputs{1.0, 0.0});
  if (!(in.V_L > 0.0)) {
    curve.fit_note = "V_L(x0) = 0: envelope shape undefined";
    return;
  }
  double pmax = 0.0;
  for (const auto& p : curve.points) pmax = std::max(pmax, p.p_hat);
  if (pmax <= 0.0) {
    curve.fit_note = "no events observed";
    return;
  }
  const double offset = (curve.L + 2) * std::log(in.V_L);
  auto at = [&](double g) { return fit_at(curve, pmax * std::pow(10.0, g) * (1.0 + 1e-9), offset, in.M); };
  auto better = [](const std::optional<EnvelopeShape>& a, const std::optional<EnvelopeShape>& b) {
    return a && (!b || a->residual < b->residual);
  };
  // log10(C / pmax) on a grid over three decades, then golden-section refinement
  std::optional<EnvelopeShape> best;
  double g_best = 0.0;
  for (int i = 0; i <= 300; ++i) {
    auto s = at(i / 100.0);
    if (better(s, best)) best = s, g_best = i / 100.0;
  }
  if (best) {
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double lo = std::max(0.0, g_best - 0.01), hi = g_best + 0.01;
    for (int it = 0; it < 60; ++it) {
      const double a = hi - phi * (hi - lo), b = lo + phi * (hi - lo);
      auto sa = at(a), sb = at(b);
      if (better(sa, best)) best = sa;
      if (better(sb, best)) best = sb;
      if (!sb || (sa && sa->residual <= sb->residual)) hi = b;
      else lo = a;
    }
  }
  curve.fit = best;
  curve.fit_note = best ? "fitted shape, descriptive only" : "fewer than two points with 0 < p_hat < C";
}

namespace {

double lambda_min(std::span<const double> m, std::size_t d) {
  if (d == 1) return m[0];
  Eigen::MatrixXd A(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m[i * d + j];
  return brackets::smallest_eigenvalue(A);
}

}  // namespace

TailCurve lambda_tails(const Model& model, int L, std::span<const double> K_grid, double t, MatrixKind which,
                       const EnsembleSpec& ensemble, std::optional<EnvelopeInputs> envelope) {
  check_K_grid(K_grid);
  if (!(t > 0.0 && t <= 1.0)) throw ConfigError("t must lie in (0, 1]");
  if (L < 1) throw ConfigError("L must be >= 1");
  SimConfig cfg = ensemble.sim;
  cfg.T = t;
  cfg.validate();
  const std::size_t d = static_cast<std::size_t>(model.dim());
  const std::size_t n = cfg.n_steps;
  const double h = cfg.h();
  std::vector<std::size_t> idx;
  for (double K : K_grid) idx.push_back(node_index(t / std::pow(K, 1.0 / (L + 1)), h, n));
  const double tL = std::pow(t, L);

  // per path: one event flag per K, or empty on divergence
  auto flags = parallel_map(ensemble.paths, ensemble.workers, [&](std::size_t i) {
    std::vector<char> ev;
    try {
      const auto grid = flows::sample_brownian(cfg, model.noise_dim(), ensemble.first_stream + i);
      const auto tr = flows::simulate_x(model, cfg, grid);
      const auto fl = flows::simulate_flow(model, cfg, grid, tr);
      const auto C = flows::malliavin_C_path(fl, tr, model);
      const auto Q = which == MatrixKind::Q ? flows::malliavin_Q_path(fl, C) : flows::GridPath{};
      for (std::size_t j = 0; j < K_grid.size(); ++j) {
        const auto m = which == MatrixKind::Q ? Q.at(idx[j]) : C.at(idx[j]);
        ev.push_back(lambda_min(m, d) <= tL / K_grid[j] ? 1 : 0);
      }
    } catch (const DivergenceError&) {
      ev.clear();
    }
    return ev;
  });

  TailCurve curve;
  curve.L = L;
  curve.t = t;
  curve.x0 = cfg.x0;
  curve.which = which == MatrixKind::C ? "C-matrix" : "Q-matrix";
  curve.claim = "small-ball tail of the smallest eigenvalue of the Malliavin matrix at scale t^L/K";
  std::vector<std::size_t> events(K_grid.size(), 0);
  std::size_t trials = 0;
  for (const auto& ev : flags) {
    if (ev.empty()) {
      ++curve.diverged;
      continue;
    }
    ++trials;
    for (std::size_t j = 0; j < ev.size(); ++j) events[j] += static_cast<std::size_t>(ev[j]);
  }
  for (std::size_t j = 0; j < K_grid.size(); ++j) curve.points.push_back(make_point(K_grid[j], events[j], trials, t));
  curve.upper_bound_only = events.back() == 0;
  fit_envelope_shape(curve, envelope);
  return curve;
}

double remainder_statistic(const flows::GridPath& R, double h, double t, double K, int L) {
  const std::size_t last = node_index(t / K, h, R.size() - 1);
  double acc = 0.0;
  auto sq = [&](std::size_t k) {
    double s = 0.0;
    for (double v : R.at(k)) s += v * v;
    return s;
  };
  for (std::size_t k = 0; k < last; ++k) acc += 0.5 * (sq(k) + sq(k + 1)) * h;
  return acc / std::pow(t, L);
}

TailCurve remainder_tails(const Model& model, const brackets::BracketTable& table, int base, int L, double eps,
                          std::span<const double> K_grid, const EnsembleSpec& ensemble,
                          std::optional<EnvelopeInputs> envelope) {
  check_K_grid(K_grid);
  if (L < 1) throw ConfigError("L must be >= 1");
  if (!(eps > 0.0) || eps >= L + 1) throw ConfigError("epsilon must lie in (0, L + 1)");
  SimConfig cfg = ensemble.sim;
  cfg.T = 0.5;
  cfg.validate();
  const double h = cfg.h();
  const flows::ChaosExpansion expansion(L, table, base, cfg.x0);
  constexpr int n_t = 7;  // t = 2^-1 .. 2^-7
  const std::size_t nK = K_grid.size();

  auto flags = parallel_map(ensemble.paths, ensemble.workers, [&](std::size_t i) {
    std::vector<char> ev;
    try {
      const auto grid = flows::sample_brownian(cfg, model.noise_dim(), ensemble.first_stream + i);
      const auto tr = flows::simulate_x(model, cfg, grid);
      const auto fl = flows::simulate_flow(model, cfg, grid, tr);
      const auto R = expansion.remainder_path(grid, tr, fl);
      for (int it = 1; it <= n_t; ++it) {
        const double t = std::ldexp(1.0, -it);
        for (double K : K_grid)
          ev.push_back(remainder_statistic(R, h, t, K, L) >= std::pow(K, -(L + 1 - eps)) ? 1 : 0);
      }
    } catch (const DivergenceError&) {
      ev.clear();
    }
    return ev;
  });

  TailCurve curve;
  curve.L = L;
  curve.t = 0.5;
  curve.x0 = cfg.x0;
  curve.which = "remainder";
  curve.claim = "tail of the time-averaged squared chaos remainder, sup over dyadic t";
  std::vector<std::size_t> events(n_t * nK, 0);
  std::size_t trials = 0;
  for (const auto& ev : flags) {
    if (ev.empty()) {
      ++curve.diverged;
      continue;
    }
    ++trials;
    for (std::size_t j = 0; j < ev.size(); ++j) events[j] += static_cast<std::size_t>(ev[j]);
  }
  for (std::size_t j = 0; j < nK; ++j) {
    std::size_t best = 0;
    int best_t = 1;
    for (int it = 1; it <= n_t; ++it) {
      const std::size_t e = events[static_cast<std::size_t>(it - 1) * nK + j];
      if (e > best) best = e, best_t = it;
    }
    curve.points.push_back(make_point(K_grid[j], best, trials, std::ldexp(1.0, -best_t)));
  }
  curve.upper_bound_only = curve.points.back().events == 0;
  fit_envelope_shape(curve, envelope);
  return curve;
}

// ---------------------------------------------------------------------------

MomentEstimate inverse_det_moments(const Model& model, double p, double t, const EnsembleSpec& ensemble) {
  if (!(p > 0.0)) throw ConfigError("moment order p must be > 0");
  if (!(t > 0.0)) throw ConfigError("t must be > 0");
  SimConfig cfg = ensemble.sim;
  cfg.T = t;
  cfg.validate();
  const std::size_t n = cfg.n_steps;
  auto dets = parallel_map(ensemble.paths, ensemble.workers, [&](std::size_t i) {
    try {
      const auto grid = flows::sample_brownian(cfg, model.noise_dim(), ensemble.first_stream + i);
      const auto tr = flows::simulate_x(model, cfg, grid);
      const auto fl = flows::simulate_flow(model, cfg, grid, tr);
      return flows::malliavin_matrices(fl, tr, model, n).Q.determinant();
    } catch (const DivergenceError&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  });
  MomentEstimate est;
  est.p = p;
  est.t = t;
  std::vector<double> v;
  for (double det : dets) {
    if (std::isnan(det)) {
      ++est.diverged;
      continue;
    }
    if (det <= 0.0) {
      ++est.nonpositive;
      continue;
    }
    v.push_back(std::pow(det, -p));
  }
  est.trials = v.size();
  if (est.nonpositive > 0 || v.empty()) {
    est.valid = false;
    est.estimate = std::numeric_limits<double>::quiet_NaN();
    return est;
  }
  double sum = 0.0;
  for (double x : v) sum += x;
  const double nn = static_cast<double>(v.size());
  est.estimate = sum / nn;
  double ss = 0.0;
  for (double x : v) ss += (x - est.estimate) * (x - est.estimate);
  est.std_error = v.size() > 1 ? std::sqrt(ss / (nn - 1.0) / nn) : 0.0;
  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const std::size_t top = std::max<std::size_t>(1, v.size() / 100);
  double top_sum = 0.0;
  for (std::size_t i = 0; i < top; ++i) top_sum += sorted[i];
  est.heavy_tail = v.size() >= 100 && top_sum > 0.5 * sum;
  return est;
}

MomentScaling det_moment_scaling(const Model& model, double p, std::span<const double> t_list, int L,
                                 const EnsembleSpec& ensemble, double margin) {
  if (t_list.size() < 2) throw ConfigError("scaling study needs at least two t values");
  MomentScaling out;
  std::vector<std::pair<double, double>> xy;
  for (double t : t_list) {
    out.estimates.push_back(inverse_det_moments(model, p, t, ensemble));
    const auto& e = out.estimates.back();
    if (e.valid && e.estimate > 0) xy.emplace_back(std::log(t), std::log(e.estimate));
  }
  out.bound_exponent = -p * model.dim() * L;
  out.margin = margin;
  if (xy.size() >= 2) {
    double mx = 0, my = 0;
    for (auto& [x, y] : xy) mx += x, my += y;
    mx /= static_cast<double>(xy.size());
    my /= static_cast<double>(xy.size());
    double sxy = 0, sxx = 0;
    for (auto& [x, y] : xy) sxy += (x - mx) * (y - my), sxx += (x - mx) * (x - mx);
    out.slope = sxy / sxx;
    out.within_bound = out.slope >= out.bound_exponent - margin;
  } else {
    out.slope = std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Densities

std::size_t GridSpec::size() const noexcept {
  std::size_t s = 1;
  for (auto k : n) s *= k;
  return s;
}

std::vector<double> GridSpec::point(std::size_t index) const {
  const std::size_t d = dim();
  std::vector<double> p(d);
  for (std::size_t j = d; j-- > 0;) {
    const std::size_t i = index % n[j];
    index /= n[j];
    p[j] = n[j] == 1 ? 0.5 * (lo[j] + hi[j]) : lo[j] + (hi[j] - lo[j]) * static_cast<double>(i) / (n[j] - 1.0);
  }
  return p;
}

double GridSpec::cell_volume() const {
  double v = 1.0;
  for (std::size_t j = 0; j < dim(); ++j) v *= n[j] > 1 ? (hi[j] - lo[j]) / (n[j] - 1.0) : 1.0;
  return v;
}

void GridSpec::validate() const {
  if (lo.empty() || lo.size() != hi.size() || lo.size() != n.size())
    throw ConfigError("density grid needs lo, hi and n for every coordinate");
  for (std::size_t j = 0; j < lo.size(); ++j) {
    if (n[j] < 2) throw ConfigError("density grid needs at least 2 points per axis");
    if (!(hi[j] > lo[j])) throw ConfigError("density grid needs hi > lo");
  }
}

double DensityEstimate::mass() const {
  double s = 0.0;
  for (double v : values) s += v;
  return s * grid.cell_volume();
}

std::vector<double> silverman_bandwidth(const std::vector<std::vector<double>>& samples) {
  if (samples.empty()) throw ConfigError("empty ensemble");
  const std::size_t d = samples.front().size();
  const double n = static_cast<double>(samples.size());
  std::vector<double> bw(d);
  const double factor = std::pow(4.0 / ((d + 2.0) * n), 1.0 / (d + 4.0));
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (const auto& s : samples) mean += s[j];
    mean /= n;
    double ss = 0.0;
    for (const auto& s : samples) ss += (s[j] - mean) * (s[j] - mean);
    const double sd = samples.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    bw[j] = sd > 0.0 ? sd * factor : 1e-3;
  }
  return bw;
}

DensityEstimate kde_density(const std::vector<std::vector<double>>& samples, const GridSpec& grid,
                            std::optional<std::vector<double>> bandwidth) {
  if (samples.empty()) throw ConfigError("empty ensemble");
  grid.validate();
  const std::size_t d = grid.dim();
  for (const auto& s : samples)
    if (s.size() != d) throw ConfigError("sample dimension differs from the grid dimension");
  DensityEstimate out;
  out.grid = grid;
  out.samples = samples.size();
  out.bandwidth = bandwidth ? *bandwidth : silverman_bandwidth(samples);
  if (out.bandwidth.size() != d) throw ConfigError("bandwidth needs one entry per coordinate");
  for (double b : out.bandwidth)
    if (!(b > 0.0)) throw ConfigError("bandwidth entries must be > 0");

  std::vector<std::vector<double>> axes(d);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t i = 0; i < grid.n[j]; ++i)
      axes[j].push_back(grid.lo[j] + (grid.hi[j] - grid.lo[j]) * static_cast<double>(i) / (grid.n[j] - 1.0));

  const std::size_t total = grid.size();
  out.values.assign(total, 0.0);
  std::vector<std::vector<double>> kern(d);
  std::vector<double> partial;
  for (const auto& s : samples) {
    for (std::size_t j = 0; j < d; ++j) {
      kern[j].resize(grid.n[j]);
      const double inv = 1.0 / out.bandwidth[j];
      for (std::size_t i = 0; i < grid.n[j]; ++i) {
        const double z = (axes[j][i] - s[j]) * inv;
        kern[j][i] = std::exp(-0.5 * z * z);
      }
    }
    // outer product accumulated in row-major order
    partial.assign(1, 1.0);
    for (std::size_t j = 0; j < d; ++j) {
      std::vector<double> next;
      next.reserve(partial.size() * grid.n[j]);
      for (double a : partial)
        for (double k : kern[j]) next.push_back(a * k);
      partial.swap(next);
    }
    for (std::size_t g = 0; g < total; ++g) out.values[g] += partial[g];
  }
  double norm = static_cast<double>(samples.size());
  for (std::size_t j = 0; j < d; ++j) norm *= out.bandwidth[j] * std::sqrt(2.0 * std::numbers::pi);
  for (double& v : out.values) v /= norm;
  return out;
}

namespace {

double envelope_u(std::span<const double> x0, std::span<const double> y, double t, int N) {
  double r2 = 0.0, x2 = 0.0;
  for (std::size_t j = 0; j < x0.size(); ++j) {
    r2 += (y[j] - x0[j]) * (y[j] - x0[j]);
    x2 += x0[j] * x0[j];
  }
  const double r = std::min(std::sqrt(r2), 1.0);
  return r * r / (t * std::pow(1.0 + std::sqrt(x2), 2 * N));
}

}  // namespace

EnvelopeReport envelope_check(const DensityEstimate& density, std::span<const double> x0, double t, int N, double M) {
  if (x0.size() != density.grid.dim()) throw ConfigError("x0 dimension differs from the density grid");
  if (!(t > 0.0)) throw ConfigError("t must be > 0");
  if (N < 1) throw ConfigError("N must be >= 1");
  EnvelopeReport rep;
  rep.M = M;
  rep.t = t;
  rep.N = N;
  std::vector<double> u, ell;
  for (std::size_t g = 0; g < density.values.size(); ++g) {
    const auto y = density.grid.point(g);
    double r2 = 0.0;
    for (std::size_t j = 0; j < y.size(); ++j) r2 += (y[j] - x0[j]) * (y[j] - x0[j]);
    const double r = std::min(std::sqrt(r2), 1.0);
    if (!(t <= r / (4.0 * M))) continue;
    if (!(density.values[g] > 0.0)) continue;
    rep.region.push_back(g);
    u.push_back(envelope_u(x0, y, t, N));
    ell.push_back(std::log(density.values[g]));
  }
  if (rep.region.empty()) {
    rep.empty_region = true;
    return rep;
  }
  const std::size_t n = u.size();
  double ubar = 0.0, lbar = 0.0;
  for (std::size_t i = 0; i < n; ++i) ubar += u[i], lbar += ell[i];
  ubar /= static_cast<double>(n);
  lbar /= static_cast<double>(n);
  auto logK = [&](double C) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, ell[i] + C * u[i]);
    return m;
  };
  // mean gap = logK(C) - C ubar - lbar, convex piecewise linear in C
  auto gap = [&](double C) { return logK(C) - C * ubar - lbar; };
  // right derivative of the gap: largest u attaining the max, minus ubar
  auto slope = [&](double C) {
    const double m = logK(C);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i)
      if (ell[i] + C * u[i] == m) best = std::max(best, u[i]);
    return best - ubar;
  };
  double umin = u[0], umax = u[0], lmin = ell[0], lmax = ell[0];
  for (std::size_t i = 1; i < n; ++i) {
    umin = std::min(umin, u[i]), umax = std::max(umax, u[i]);
    lmin = std::min(lmin, ell[i]), lmax = std::max(lmax, ell[i]);
  }
  double C = 0.0;
  if (slope(0.0) < 0.0) {
    // every breakpoint lies below (lmax - lmin) / (smallest gap between distinct u)
    std::vector<double> us = u;
    std::sort(us.begin(), us.end());
    double du = umax - umin;
    for (std::size_t i = 1; i < n; ++i)
      if (us[i] > us[i - 1]) du = std::min(du, us[i] - us[i - 1]);
    double lo = 0.0, hi = (lmax - lmin) / du + 1.0;
    for (int it = 0; it < 200 && hi - lo > 1e-13 * hi; ++it) {
      const double mid = 0.5 * (lo + hi);
      (slope(mid) < 0.0 ? lo : hi) = mid;
    }
    C = gap(lo) < gap(hi) ? lo : hi;
  }
  rep.C = C;
  rep.log_K = logK(C);
  rep.mean_gap = gap(C);
  rep.max_violation = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) rep.max_violation = std::max(rep.max_violation, ell[i] - (rep.log_K - C * u[i]));
  return rep;
}

double envelope_value(const EnvelopeReport& report, std::span<const double> x0, std::span<const double> y) {
  return report.log_K - report.C * envelope_u(x0, y, report.t, report.N);
}

// ---------------------------------------------------------------------------

void write_tail_csv(std::ostream& out, const TailCurve& curve) {
  out << "K,events,trials,p_hat,ci_lo,ci_hi\n";
  for (const auto& p : curve.points)
    out << format_double(p.K) << ',' << p.events << ',' << p.trials << ',' << format_double(p.p_hat) << ','
        << format_double(p.ci_lo) << ',' << format_double(p.ci_hi) << '\n';
}

void write_density_csv(std::ostream& out, const DensityEstimate& density) {
  const std::size_t d = density.grid.dim();
  for (std::size_t j = 1; j <= d; ++j) out << "y_" << j << ',';
  out << "p_hat\n";
  for (std::size_t g = 0; g < density.values.size(); ++g) {
    for (double v : density.grid.point(g)) out << format_double(v) << ',';
    out << format_double(density.values[g]) << '\n';
  }
}

void write_moment_csv(std::ostream& out, std::span<const MomentEstimate> rows) {
  out << "p,t,estimate,std_error,trials,nonpositive,heavy_tail\n";
  for (const auto& r : rows)
    out << format_double(r.p) << ',' << format_double(r.t) << ',' << format_double(r.estimate) << ','
        << format_double(r.std_error) << ',' << r.trials << ',' << r.nonpositive << ',' << (r.heavy_tail ? 1 : 0)
        << '\n';
}

}  // namespace hypolab::estimators
