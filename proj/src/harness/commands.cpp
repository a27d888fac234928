#include "hypolab/harness/commands.hpp"

#include "hypolab/brackets.hpp"
#include "hypolab/ensemble.hpp"
#include "hypolab/errors.hpp"
#include "hypolab/estimators.hpp"
#include "hypolab/flows.hpp"
#include "hypolab/io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#ifndef HYPOLAB_VERSION
#define HYPOLAB_VERSION "0.0.0"
#endif

namespace hypolab::harness {

using json = nlohmann::ordered_json;
using flows::Model;

std::string tool_version() { return HYPOLAB_VERSION; }

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names = {"check-hormander", "simulate",   "malliavin", "tails",
                                                 "remainder-tails", "det-moments", "density",   "probe-assumptions"};
  return names;
}

namespace {

struct Context {
  const ExperimentConfig& cfg;
  const RunOptions& opt;
  OutputSet& out;
  fieldlang::CoefficientSet coeffs;
  Model model;
  int exit_code = kExitOk;
  std::string message;

  Context(const ExperimentConfig& c, const RunOptions& o, OutputSet& s)
      : cfg(c), opt(o), out(s), coeffs(c.coefficients()), model(coeffs) {}

  int dim() const { return cfg.model.dim; }
  const AnalysisBlock& a() const { return cfg.analysis; }

  estimators::EnsembleSpec ensemble() const {
    estimators::EnsembleSpec e;
    e.sim = cfg.sim_config();
    e.paths = cfg.simulation.paths;
    e.workers = opt.workers;
    return e;
  }

  void check_divergence(std::size_t diverged, std::size_t paths) {
    const double frac = paths ? static_cast<double>(diverged) / static_cast<double>(paths) : 0.0;
    if (frac > cfg.simulation.max_divergence_fraction && exit_code == kExitOk) {
      exit_code = kExitDivergence;
      message = std::to_string(diverged) + " of " + std::to_string(paths) + " paths diverged (fraction " +
                format_double(frac) + " > " + format_double(cfg.simulation.max_divergence_fraction) + ")";
    }
  }

  void write_json(const std::string& name, const json& j) { out.write(name, j.dump(2) + "\n"); }
};

std::string csv_header(const std::string& prefix, int d) {
  std::string s;
  for (int j = 1; j <= d; ++j) s += "," + prefix + std::to_string(j);
  return s;
}

double finite_or_nan(double v) { return std::isfinite(v) ? v : std::numeric_limits<double>::quiet_NaN(); }

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(finite_or_nan(m(i, j)));
    rows.push_back(r);
  }
  return rows;
}

Eigen::MatrixXd as_matrix(std::span<const double> v, std::size_t d) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[i * d + j];
  return m;
}

json sim_json(const ExperimentConfig& c) {
  return {{"T", c.simulation.T},
          {"n_steps", c.simulation.n_steps},
          {"h", c.sim_config().h()},
          {"scheme", std::string(flows::scheme_name(c.simulation.scheme))},
          {"comparison_only", c.sim_config().comparison_only()},
          {"paths", c.simulation.paths},
          {"seed", c.simulation.seed}};
}

// Node indices 0 = k_0 < ... < k_r = n with at most `max_points` entries.
std::vector<std::size_t> sample_nodes(std::size_t n, std::size_t max_points) {
  std::vector<std::size_t> idx;
  const std::size_t stride = std::max<std::size_t>(1, n / std::max<std::size_t>(1, max_points - 1));
  for (std::size_t k = 0; k <= n; k += stride) idx.push_back(k);
  if (idx.back() != n) idx.push_back(n);
  return idx;
}

int level_L(const Context& ctx, int fallback) { return ctx.a().L.value_or(fallback); }

// ---------------------------------------------------------------------------

void cmd_check_hormander(Context& ctx) {
  const int L = level_L(ctx, 3);
  const double lo = ctx.a().box_lo.value_or(-1.0), hi = ctx.a().box_hi.value_or(1.0);
  const int n = ctx.a().box_n.value_or(5);
  const brackets::BracketTable table(ctx.coeffs, L - 1);
  const auto points = brackets::tensor_grid(ctx.dim(), lo, hi, n);
  const auto rep = brackets::check_hormander(points, L, table);

  std::ostringstream csv;
  csv << "index" << csv_header("x_", ctx.dim());
  for (int l = 1; l <= L; ++l) csv << ",V_" << l;
  csv << ",in_U_L\n";
  for (std::size_t i = 0; i < points.size(); ++i) {
    csv << i;
    for (double v : points[i]) csv << ',' << format_double(v);
    for (int l = 1; l <= L; ++l) csv << ',' << format_double(brackets::v_L(points[i], l, table));
    csv << ',' << (rep.points[i].in_u_l ? 1 : 0) << '\n';
  }

  json j;
  j["claim"] = "Hormander condition: iterated brackets of the diffusion fields span R^d at every sampled point";
  j["L"] = L;
  j["box"] = {{"lo", lo}, {"hi", hi}, {"n", n}};
  j["points"] = points.size();
  j["inf_by_level"] = rep.inf_by_level;
  j["inf_V_L"] = rep.inf_v_l;
  j["l0_candidate"] = rep.l0_candidate ? json(*rep.l0_candidate) : json(nullptr);
  j["uh_surrogate"] = rep.uh_surrogate;
  j["membership_tolerance"] = rep.membership_tolerance;
  j["caveat"] = rep.caveat;

  ChartSpec chart{"V_" + std::to_string(L) + " along each axis through the box centre", "coordinate", "V_L", {}, false,
                  false};
  const double centre = 0.5 * (lo + hi);
  for (int axis = 0; axis < ctx.dim(); ++axis) {
    Series s{"axis x_" + std::to_string(axis + 1), {}, {}};
    for (int i = 0; i <= 64; ++i) {
      std::vector<double> x(static_cast<std::size_t>(ctx.dim()), centre);
      x[static_cast<std::size_t>(axis)] = lo + (hi - lo) * i / 64.0;
      s.x.push_back(x[static_cast<std::size_t>(axis)]);
      s.y.push_back(brackets::v_L(x, L, table));
    }
    chart.series.push_back(std::move(s));
  }
  ctx.write_json("hormander.json", j);
  ctx.out.write("hormander_points.csv", csv.str());
  ctx.out.write("hormander.svg", svg_line_chart(chart));
}

// ---------------------------------------------------------------------------

struct SimPath {
  bool diverged = false;
  std::string reason;
  std::vector<double> X;  // sampled nodes, dim values each
  double kj_error = 0.0;
};

double kj_sup_error(const flows::FlowTrajectory& fl) {
  const std::size_t d = static_cast<std::size_t>(fl.dim);
  double worst = 0.0;
  for (std::size_t k = 0; k < fl.J.size(); ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double v = 0.0;
        for (std::size_t l = 0; l < d; ++l) v += fl.K.at(k)[i * d + l] * fl.J.at(k)[l * d + j];
        v -= i == j ? 1.0 : 0.0;
        s += v * v;
      }
    worst = std::max(worst, std::sqrt(s));
  }
  return worst;
}

void cmd_simulate(Context& ctx) {
  const auto sim = ctx.cfg.sim_config();
  const std::size_t d = static_cast<std::size_t>(ctx.dim());
  const auto nodes = sample_nodes(sim.n_steps, 257);
  const std::size_t paths = ctx.cfg.simulation.paths;
  const auto results = parallel_map(paths, ctx.opt.workers, [&](std::size_t i) {
    SimPath r;
    try {
      const auto g = flows::sample_brownian(sim, ctx.model.noise_dim(), i);
      const auto tr = flows::simulate_x(ctx.model, sim, g);
      const auto fl = flows::simulate_flow(ctx.model, sim, g, tr);
      for (std::size_t k : nodes)
        for (double v : tr.X.at(k)) r.X.push_back(v);
      r.kj_error = kj_sup_error(fl);
    } catch (const DivergenceError& e) {
      r.diverged = true;
      r.reason = e.what();
    }
    return r;
  });

  std::size_t diverged = 0, ok = 0;
  std::vector<double> mean(nodes.size() * d, 0.0), m2(nodes.size() * d, 0.0);
  double kj_max = 0.0, kj_mean = 0.0;
  std::string first_reason;
  for (const auto& r : results) {
    if (r.diverged) {
      if (!diverged) first_reason = r.reason;
      ++diverged;
      continue;
    }
    ++ok;
    for (std::size_t q = 0; q < mean.size(); ++q) {
      const double delta = r.X[q] - mean[q];
      mean[q] += delta / static_cast<double>(ok);
      m2[q] += delta * (r.X[q] - mean[q]);
    }
    kj_max = std::max(kj_max, r.kj_error);
    kj_mean += r.kj_error;
  }
  if (ok) kj_mean /= static_cast<double>(ok);

  std::ostringstream csv;
  csv << "t" << csv_header("mean_", ctx.dim()) << csv_header("sd_", ctx.dim()) << "\n";
  for (std::size_t q = 0; q < nodes.size(); ++q) {
    csv << format_double(static_cast<double>(nodes[q]) * sim.h());
    for (std::size_t j = 0; j < d; ++j) csv << ',' << format_double(ok ? mean[q * d + j] : std::nan(""));
    for (std::size_t j = 0; j < d; ++j)
      csv << ',' << format_double(ok > 1 ? std::sqrt(m2[q * d + j] / static_cast<double>(ok - 1)) : std::nan(""));
    csv << '\n';
  }
  ctx.out.write("summary.csv", csv.str());

  const std::size_t save = std::min<std::size_t>(ctx.a().save_paths.value_or(1), paths);
  json saved = json::array();
  for (std::size_t i = 0, written = 0; i < paths && written < save; ++i) {
    if (results[i].diverged) continue;
    const auto g = flows::sample_brownian(sim, ctx.model.noise_dim(), i);
    const auto tr = flows::simulate_x(ctx.model, sim, g);
    const auto fl = flows::simulate_flow(ctx.model, sim, g, tr);
    std::ostringstream p;
    flows::write_flow_csv(p, tr, fl);
    const std::string name = "path_" + std::to_string(i) + ".csv";
    ctx.out.write(name, p.str());
    saved.push_back(name);
    ++written;
  }

  json j;
  j["claim"] = "strong solution with its Jacobian flow J and inverse flow K";
  j["simulation"] = sim_json(ctx.cfg);
  j["diverged"] = diverged;
  j["divergence_fraction"] = static_cast<double>(diverged) / static_cast<double>(paths);
  if (!first_reason.empty()) j["first_divergence"] = first_reason;
  std::vector<double> final_mean(d);
  for (std::size_t jj = 0; jj < d; ++jj) final_mean[jj] = ok ? mean[(nodes.size() - 1) * d + jj] : std::nan("");
  j["mean_X_T"] = final_mean;
  j["sup_KJ_minus_I"] = {{"max_over_paths", kj_max}, {"mean_over_paths", kj_mean}};
  j["saved_paths"] = saved;
  ctx.write_json("simulate.json", j);

  ChartSpec chart{"ensemble mean of X(t)", "t", "mean X", {}, false, false};
  for (std::size_t jj = 0; jj < d; ++jj) {
    Series s{"X_" + std::to_string(jj + 1), {}, {}};
    for (std::size_t q = 0; q < nodes.size(); ++q) {
      s.x.push_back(static_cast<double>(nodes[q]) * sim.h());
      s.y.push_back(ok ? mean[q * d + jj] : std::nan(""));
    }
    chart.series.push_back(std::move(s));
  }
  ctx.out.write("simulate.svg", svg_line_chart(chart));
  ctx.check_divergence(diverged, paths);
}

// ---------------------------------------------------------------------------

struct MalliavinPath {
  bool diverged = false;
  std::vector<double> C, Q, D0;  // d*d, d*d, d*m
  double lmin_C = 0, lmin_Q = 0, det_Q = 0;
  std::vector<double> lmin_Q_path;
};

void cmd_malliavin(Context& ctx) {
  const auto sim = ctx.cfg.sim_config();
  const std::size_t d = static_cast<std::size_t>(ctx.dim());
  const std::size_t m = static_cast<std::size_t>(ctx.model.noise_dim());
  const std::size_t n = sim.n_steps;
  const auto nodes = sample_nodes(n, 65);
  const std::size_t paths = ctx.cfg.simulation.paths;
  const auto results = parallel_map(paths, ctx.opt.workers, [&](std::size_t i) {
    MalliavinPath r;
    try {
      const auto g = flows::sample_brownian(sim, ctx.model.noise_dim(), i);
      const auto tr = flows::simulate_x(ctx.model, sim, g);
      const auto fl = flows::simulate_flow(ctx.model, sim, g, tr);
      const auto Cp = flows::malliavin_C_path(fl, tr, ctx.model);
      const auto Qp = flows::malliavin_Q_path(fl, Cp);
      const auto C = as_matrix(Cp.at(n), d), Q = as_matrix(Qp.at(n), d);
      r.C.assign(Cp.at(n).begin(), Cp.at(n).end());
      r.Q.assign(Qp.at(n).begin(), Qp.at(n).end());
      r.lmin_C = brackets::smallest_eigenvalue(C);
      r.lmin_Q = brackets::smallest_eigenvalue(Q);
      r.det_Q = Q.determinant();
      const auto D = flows::malliavin_derivative(0, n, fl, tr, ctx.model);
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < m; ++b) r.D0.push_back(D(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)));
      for (std::size_t k : nodes) r.lmin_Q_path.push_back(brackets::smallest_eigenvalue(as_matrix(Qp.at(k), d)));
    } catch (const DivergenceError&) {
      r.diverged = true;
    }
    return r;
  });

  std::ostringstream csv;
  csv << "stream,lambda_min_C,lambda_min_Q,det_Q";
  for (std::size_t a = 1; a <= d; ++a)
    for (std::size_t b = 1; b <= d; ++b) csv << ",Q_" << a << b;
  csv << "\n";
  std::size_t diverged = 0, ok = 0;
  std::vector<double> Cm(d * d, 0.0), Qm(d * d, 0.0), Q2(d * d, 0.0), Dm(d * m, 0.0), lpath(nodes.size(), 0.0);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    if (r.diverged) {
      ++diverged;
      continue;
    }
    ++ok;
    csv << i << ',' << format_double(r.lmin_C) << ',' << format_double(r.lmin_Q) << ',' << format_double(r.det_Q);
    for (double v : r.Q) csv << ',' << format_double(v);
    csv << '\n';
    for (std::size_t q = 0; q < d * d; ++q) Cm[q] += r.C[q], Qm[q] += r.Q[q], Q2[q] += r.Q[q] * r.Q[q];
    for (std::size_t q = 0; q < d * m; ++q) Dm[q] += r.D0[q];
    for (std::size_t q = 0; q < nodes.size(); ++q) lpath[q] += r.lmin_Q_path[q];
  }
  const double w = ok ? 1.0 / static_cast<double>(ok) : std::nan("");
  std::vector<double> Qse(d * d);
  for (std::size_t q = 0; q < d * d; ++q) {
    Cm[q] *= w;
    Qm[q] *= w;
    const double var = ok > 1 ? (Q2[q] * w - Qm[q] * Qm[q]) * static_cast<double>(ok) / (ok - 1.0) : 0.0;
    Qse[q] = ok ? std::sqrt(std::max(0.0, var) * w) : std::nan("");
  }
  for (double& v : Dm) v *= w;
  for (double& v : lpath) v *= w;
  ctx.out.write("malliavin.csv", csv.str());

  Eigen::MatrixXd Dmat(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(m));
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < m; ++b) Dmat(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = Dm[a * m + b];
  json j;
  j["claim"] = "Malliavin covariance C(t) = int K sigma (K sigma)^T ds and reduced covariance Q(t) = J C J^T";
  j["simulation"] = sim_json(ctx.cfg);
  j["quadrature"] = "left-endpoint";
  j["t"] = sim.T;
  j["diverged"] = diverged;
  j["mean_C"] = matrix_json(as_matrix(Cm, d));
  j["mean_Q"] = matrix_json(as_matrix(Qm, d));
  j["std_error_Q"] = matrix_json(as_matrix(Qse, d));
  j["mean_D_0_X_T"] = matrix_json(Dmat);
  ctx.write_json("malliavin.json", j);

  ChartSpec chart{"mean smallest eigenvalue of Q(t)", "t", "lambda_min Q", {}, false, false};
  Series s{"E lambda_min Q(t)", {}, lpath};
  for (std::size_t k : nodes) s.x.push_back(static_cast<double>(k) * sim.h());
  chart.series.push_back(std::move(s));
  ctx.out.write("malliavin.svg", svg_line_chart(chart));
  ctx.check_divergence(diverged, paths);
}

// ---------------------------------------------------------------------------

json curve_json(const estimators::TailCurve& c) {
  json pts = json::array();
  for (const auto& p : c.points)
    pts.push_back({{"K", p.K},
                   {"events", p.events},
                   {"trials", p.trials},
                   {"p_hat", p.p_hat},
                   {"ci_lo", p.ci_lo},
                   {"ci_hi", p.ci_hi},
                   {"t", p.t}});
  json j;
  j["claim"] = c.claim;
  j["which"] = c.which;
  j["L"] = c.L;
  j["t"] = c.t;
  j["x0"] = c.x0;
  j["points"] = pts;
  j["diverged"] = c.diverged;
  j["upper_bound_only"] = c.upper_bound_only;
  j["non_increasing_within_ci"] = estimators::non_increasing_within_ci(c);
  if (c.fit)
    j["envelope_fit"] = {{"C", c.fit->C},
                         {"lambda", c.fit->lambda},
                         {"mu", c.fit->mu},
                         {"residual", c.fit->residual},
                         {"points_used", c.fit->points_used},
                         {"label", "fitted shape constants; the theoretical constants are non-constructive"}};
  else
    j["envelope_fit"] = nullptr;
  j["fit_note"] = c.fit_note;
  return j;
}

void emit_curve(Context& ctx, const std::string& stem, const estimators::TailCurve& c, json extra) {
  std::ostringstream csv;
  estimators::write_tail_csv(csv, c);
  ctx.out.write(stem + ".csv", csv.str());
  json j = curve_json(c);
  j["simulation"] = sim_json(ctx.cfg);
  for (auto& [k, v] : extra.items()) j[k] = v;
  ctx.write_json(stem + ".json", j);
  ChartSpec chart{stem + ": tail probability against K", "K", "p_hat", {}, true, true};
  Series p{"p_hat", {}, {}}, hi{"upper 95% bound", {}, {}};
  for (const auto& pt : c.points) {
    p.x.push_back(pt.K), p.y.push_back(pt.p_hat);
    hi.x.push_back(pt.K), hi.y.push_back(pt.ci_hi);
  }
  chart.series = {p, hi};
  ctx.out.write(stem + ".svg", svg_line_chart(chart));
  ctx.check_divergence(c.diverged, ctx.cfg.simulation.paths);
}

std::optional<double> safe_M(const Context& ctx, brackets::LocalNormRequest req, json& note) {
  req.radius = ctx.a().radius.value_or(1.0);
  req.n_ball = ctx.a().n_ball.value_or(256);
  try {
    const auto bn = brackets::local_M_of_x(ctx.cfg.model.x0, ctx.coeffs, req);
    note = bn.value;
    return bn.value;
  } catch (const NonFiniteError& e) {
    note = std::string("non-finite: ") + e.what();
    return std::nullopt;
  }
}

void cmd_tails(Context& ctx) {
  const int L = level_L(ctx, 1);
  const double t = ctx.a().t.value_or(std::min(1.0, ctx.cfg.simulation.T));
  const auto which = ctx.a().which.value_or("Q-matrix") == "C-matrix" ? estimators::MatrixKind::C
                                                                       : estimators::MatrixKind::Q;
  const brackets::BracketTable table(ctx.coeffs, L - 1);
  const double VL = brackets::v_L(ctx.cfg.model.x0, L, table);
  json m_note;
  brackets::LocalNormRequest req;
  req.variant = brackets::LocalNormVariant::BracketHierarchy;
  req.L = L;
  const auto M = safe_M(ctx, req, m_note);
  std::optional<estimators::EnvelopeInputs> env;
  if (M) env = estimators::EnvelopeInputs{VL, *M};
  const auto curve = estimators::lambda_tails(ctx.model, L, *ctx.a().K, t, which, ctx.ensemble(), env);
  emit_curve(ctx, "tails", curve, {{"V_L_x0", VL}, {"M_x0", m_note}});
}

struct FieldChoice {
  std::optional<int> sigma;  // 1-based column
  std::optional<fieldlang::VectorField> custom;
  std::string text;
};

FieldChoice choose_field(const Context& ctx) {
  FieldChoice f;
  const auto spec = ctx.a().field.value_or(std::vector<std::string>{"sigma1"});
  if (spec.size() == 1 && spec[0].rfind("sigma", 0) == 0) {
    const std::string idx = spec[0].substr(5);
    int k = 0;
    try {
      k = std::stoi(idx);
    } catch (...) {
      throw ConfigError("invalid value for 'analysis.field': '" + spec[0] + "'");
    }
    if (k < 1 || k > ctx.model.noise_dim())
      throw ConfigError("invalid value for 'analysis.field': no diffusion column " + idx);
    f.sigma = k;
  } else {
    try {
      f.custom = fieldlang::parse_vector_field(spec, ctx.dim());
    } catch (const ParseError& e) {
      throw ConfigError(std::string("invalid value for 'analysis.field': ") + e.what());
    }
  }
  f.text = spec.size() == 1 ? spec[0] : "";
  for (std::size_t i = 0; spec.size() > 1 && i < spec.size(); ++i) f.text += (i ? "; " : "") + spec[i];
  return f;
}

void cmd_remainder_tails(Context& ctx) {
  const int L = level_L(ctx, 2);
  const double eps = ctx.a().epsilon.value_or(0.5);
  const auto field = choose_field(ctx);
  std::optional<brackets::BracketTable> table;
  int base = 1;
  if (field.sigma) {
    table.emplace(ctx.coeffs, L - 1);
    base = *field.sigma;
  } else {
    table.emplace(ctx.coeffs, std::vector<fieldlang::VectorField>{*field.custom}, L - 1);
  }
  const brackets::BracketTable hier(ctx.coeffs, L - 1);
  const double VL = brackets::v_L(ctx.cfg.model.x0, L, hier);
  json m_note;
  brackets::LocalNormRequest req;
  req.variant = brackets::LocalNormVariant::RemainderExpansion;
  req.L = L;
  req.field = field.custom ? *field.custom : ctx.coeffs.diffusion(base - 1);
  const auto M = safe_M(ctx, req, m_note);
  std::optional<estimators::EnvelopeInputs> env;
  if (M) env = estimators::EnvelopeInputs{VL, *M};
  const auto curve = estimators::remainder_tails(ctx.model, *table, base, L, eps, *ctx.a().K, ctx.ensemble(), env);
  emit_curve(ctx, "remainder_tails", curve,
             {{"field", field.text}, {"epsilon", eps}, {"t_grid", "2^-1 .. 2^-7"}, {"V_L_x0", VL}, {"M_x0", m_note}});
}

// ---------------------------------------------------------------------------

void cmd_det_moments(Context& ctx) {
  const double p = ctx.a().p.value_or(1.0);
  const int L = level_L(ctx, 1);
  const std::vector<double> ts = ctx.a().t_list.value_or(std::vector<double>{0.5, 0.25, 0.125, 0.0625, 0.03125});
  const auto s = estimators::det_moment_scaling(ctx.model, p, ts, L, ctx.ensemble(), ctx.a().margin.value_or(0.05));
  std::ostringstream csv;
  estimators::write_moment_csv(csv, s.estimates);
  ctx.out.write("det_moments.csv", csv.str());

  json rows = json::array();
  std::size_t nonpositive = 0, diverged = 0;
  for (const auto& e : s.estimates) {
    rows.push_back({{"p", e.p},
                    {"t", e.t},
                    {"estimate", e.valid ? json(e.estimate) : json(nullptr)},
                    {"std_error", e.std_error},
                    {"trials", e.trials},
                    {"nonpositive", e.nonpositive},
                    {"diverged", e.diverged},
                    {"heavy_tail", e.heavy_tail},
                    {"valid", e.valid}});
    nonpositive += e.nonpositive;
    diverged = std::max(diverged, e.diverged);
  }
  json j;
  j["claim"] = "finite inverse moments of det Q(t) with blow-up at most t^(-p d L) as t -> 0";
  j["simulation"] = sim_json(ctx.cfg);
  j["estimates"] = rows;
  j["slope"] = finite_or_nan(s.slope);
  j["bound_exponent"] = s.bound_exponent;
  j["margin"] = s.margin;
  j["within_bound"] = s.within_bound;
  ctx.write_json("det_moments.json", j);

  ChartSpec chart{"E[(det Q(t))^-p] against t", "t", "estimate", {}, true, true};
  Series est{"estimate", {}, {}};
  for (const auto& e : s.estimates) est.x.push_back(e.t), est.y.push_back(e.valid ? e.estimate : std::nan(""));
  chart.series.push_back(std::move(est));
  ctx.out.write("det_moments.svg", svg_line_chart(chart));
  ctx.check_divergence(diverged, ctx.cfg.simulation.paths);
  if (nonpositive > 0) {
    ctx.exit_code = kExitInvariant;
    ctx.message = std::to_string(nonpositive) + " samples with det Q <= 0";
  }
}

// ---------------------------------------------------------------------------

void cmd_density(Context& ctx) {
  auto sim = ctx.cfg.sim_config();
  const double t = ctx.a().t.value_or(sim.T);
  sim.T = t;
  const std::size_t d = static_cast<std::size_t>(ctx.dim());
  const std::size_t paths = ctx.cfg.simulation.paths;
  auto finals = parallel_map(paths, ctx.opt.workers, [&](std::size_t i) -> std::vector<double> {
    try {
      const auto g = flows::sample_brownian(sim, ctx.model.noise_dim(), i);
      const auto tr = flows::simulate_x(ctx.model, sim, g);
      const auto x = tr.X.at(sim.n_steps);
      return {x.begin(), x.end()};
    } catch (const DivergenceError&) {
      return {};
    }
  });
  std::vector<std::vector<double>> samples;
  std::size_t diverged = 0;
  for (auto& f : finals) {
    if (f.empty()) ++diverged;
    else samples.push_back(std::move(f));
  }
  if (samples.empty()) throw DivergenceError(std::string(flows::scheme_name(sim.scheme)), 0, 0.0, "every path");

  estimators::GridSpec grid;
  if (ctx.a().grid_lo) {
    grid.lo = *ctx.a().grid_lo;
    grid.hi = *ctx.a().grid_hi;
    for (double v : *ctx.a().grid_n) grid.n.push_back(static_cast<std::size_t>(v));
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0.0, ss = 0.0;
      for (const auto& s : samples) mean += s[j];
      mean /= static_cast<double>(samples.size());
      for (const auto& s : samples) ss += (s[j] - mean) * (s[j] - mean);
      const double sd = std::max(1e-6, std::sqrt(ss / std::max<std::size_t>(1, samples.size() - 1)));
      grid.lo.push_back(mean - 6 * sd);
      grid.hi.push_back(mean + 6 * sd);
      grid.n.push_back(d == 1 ? 201 : d == 2 ? 61 : 15);
    }
  }
  const auto dens = estimators::kde_density(samples, grid, ctx.a().bandwidth);
  std::ostringstream csv;
  estimators::write_density_csv(csv, dens);
  ctx.out.write("density.csv", csv.str());

  const int N = ctx.a().N.value_or(1);
  json m_note;
  double M = 0.0;
  if (ctx.a().M) {
    M = *ctx.a().M;
    m_note = M;
  } else {
    brackets::LocalNormRequest req;
    req.variant = brackets::LocalNormVariant::DensityRegion;
    const auto got = safe_M(ctx, req, m_note);
    M = got.value_or(std::numeric_limits<double>::infinity());
  }
  const auto rep = estimators::envelope_check(dens, ctx.cfg.model.x0, t, N, M);

  json j;
  j["claim"] = "Gaussian-type upper envelope of the transition density on the short-time region";
  j["simulation"] = sim_json(ctx.cfg);
  j["t"] = t;
  j["samples"] = dens.samples;
  j["diverged"] = diverged;
  j["bandwidth"] = dens.bandwidth;
  j["mass"] = dens.mass();
  j["grid"] = {{"lo", grid.lo}, {"hi", grid.hi}, {"n", grid.n}};
  j["envelope"] = {{"label", rep.label},
                   {"N", rep.N},
                   {"M_x0", m_note},
                   {"empty_region", rep.empty_region},
                   {"region_points", rep.region.size()},
                   {"log_K", rep.empty_region ? json(nullptr) : json(rep.log_K)},
                   {"C", rep.empty_region ? json(nullptr) : json(rep.C)},
                   {"max_violation", rep.empty_region ? json(nullptr) : json(rep.max_violation)},
                   {"mean_gap", rep.empty_region ? json(nullptr) : json(rep.mean_gap)}};
  ctx.write_json("density.json", j);

  // first-coordinate marginal (d > 1) or the density itself, with the envelope where defined
  ChartSpec chart{"density estimate at t = " + format_double(t), "y_1", "p_hat", {}, false, false};
  Series est{"p_hat", {}, {}}, envs{"envelope", {}, {}};
  const std::size_t n0 = grid.n[0], rest = grid.size() / n0;
  double other_cell = 1.0;
  for (std::size_t jj = 1; jj < d; ++jj) other_cell *= (grid.hi[jj] - grid.lo[jj]) / (grid.n[jj] - 1.0);
  std::vector<char> in_region(grid.size(), 0);
  for (std::size_t g : rep.region) in_region[g] = 1;
  for (std::size_t a = 0; a < n0; ++a) {
    double s = 0.0;
    for (std::size_t b = 0; b < rest; ++b) s += dens.values[a * rest + b];
    const double y1 = grid.point(a * rest)[0];
    est.x.push_back(y1);
    est.y.push_back(d == 1 ? s : s * other_cell);
    if (d == 1 && in_region[a]) {
      envs.x.push_back(y1);
      envs.y.push_back(std::exp(estimators::envelope_value(rep, ctx.cfg.model.x0, grid.point(a))));
    }
  }
  chart.series.push_back(std::move(est));
  if (!envs.x.empty()) chart.series.push_back(std::move(envs));
  ctx.out.write("density.svg", svg_line_chart(chart));
  ctx.check_divergence(diverged, paths);
}

// ---------------------------------------------------------------------------

void cmd_probe(Context& ctx) {
  flows::ProbeSpec spec;
  const auto& x0 = ctx.cfg.model.x0;
  if (ctx.a().probe_lo) {
    spec.lo = *ctx.a().probe_lo;
    spec.hi = *ctx.a().probe_hi;
  } else {
    for (double v : x0) spec.lo.push_back(v - 1.0), spec.hi.push_back(v + 1.0);
  }
  spec.samples = ctx.a().probe_samples.value_or(2000);
  spec.seed = ctx.cfg.simulation.seed;
  spec.L = ctx.a().declared_L;
  spec.L1 = ctx.a().declared_L1;
  spec.N = ctx.a().declared_N;
  spec.L3 = ctx.a().declared_L3;
  const auto rep = flows::assumption_probe(ctx.coeffs, spec);

  const std::vector<double> p_list = ctx.a().p_list.value_or(std::vector<double>{2.0, 4.0});
  const auto x0_list = ctx.a().moment_x0.value_or(std::vector<std::vector<double>>{x0});
  for (const auto& p : x0_list)
    if (p.size() != x0.size()) throw ConfigError("invalid value for 'analysis.moment_x0': wrong dimension");
  const auto mom = flows::moment_probe(ctx.model, ctx.cfg.sim_config(), p_list, x0_list, ctx.cfg.simulation.paths,
                                       ctx.opt.workers);

  auto opt_bool = [](const std::optional<bool>& b) { return b ? json(*b) : json(nullptr); };
  json j;
  j["claim"] = "one-sided Lipschitz drift, polynomial growth and bounded derivatives, sampled on boxes";
  j["box"] = {{"lo", spec.lo}, {"hi", spec.hi}, {"samples", rep.samples}};
  j["monotonicity_L"] = rep.monotonicity_L;
  j["L_by_box_scale_1_2_4"] = rep.L_by_box;
  j["non_uniform_monotonicity"] = rep.non_uniform_monotonicity;
  j["sup_ratio_by_box"] = rep.sup_ratio_by_box;
  j["growth_slope"] = rep.growth_slope;
  j["polynomial_N"] = rep.polynomial_N;
  j["polynomial_L1"] = rep.polynomial_L1;
  j["min_drift_quadratic_form"] = rep.min_drift_quadratic_form;
  j["max_d2b"] = rep.max_d2b;
  j["max_dsigma"] = rep.max_dsigma;
  j["max_d2sigma"] = rep.max_d2sigma;
  j["pass_monotonicity"] = opt_bool(rep.pass_M);
  j["pass_polynomial"] = opt_bool(rep.pass_P);
  j["pass_jacobian"] = opt_bool(rep.pass_J);
  j["moment_fitted_C"] = mom.fitted_C;
  j["moment_p_list"] = mom.p_list;
  j["simulation"] = sim_json(ctx.cfg);
  ctx.write_json("probe.json", j);

  std::ostringstream csv;
  csv << "x0_norm,p,estimate,std_error,ratio,paths,diverged,finite\n";
  std::size_t diverged = 0;
  for (const auto& r : mom.rows) {
    csv << format_double(r.x0_norm) << ',' << format_double(r.p) << ',' << format_double(r.estimate) << ','
        << format_double(r.std_error) << ',' << format_double(r.ratio) << ',' << r.paths << ',' << r.diverged << ','
        << (r.finite ? 1 : 0) << '\n';
    diverged = std::max(diverged, r.diverged);
  }
  ctx.out.write("probe_moments.csv", csv.str());
  ctx.check_divergence(diverged, ctx.cfg.simulation.paths);
}

void require(bool ok, const std::string& key, const std::string& why) {
  if (!ok) throw ConfigError("invalid value for '" + key + "': " + why);
}

}  // namespace

void validate_for(std::string_view sub, const ExperimentConfig& c) {
  if (std::find(subcommands().begin(), subcommands().end(), sub) == subcommands().end())
    throw ConfigError("unknown subcommand '" + std::string(sub) + "'");
  const auto& a = c.analysis;
  if (a.L) require(*a.L >= 1, "analysis.L", "must be >= 1");
  if (sub == "tails" || sub == "remainder-tails") {
    require(a.K.has_value(), "analysis.K", "a K grid is required");
    require(!a.K->empty(), "analysis.K", "K grid must not be empty");
    for (double K : *a.K) require(K >= 1.0, "analysis.K", "entries must be >= 1");
  }
  if (sub == "tails") {
    const double t = a.t.value_or(std::min(1.0, c.simulation.T));
    require(t > 0.0 && t <= 1.0, "analysis.t", "must lie in (0, 1]");
  }
  if (sub == "remainder-tails") {
    const int L = a.L.value_or(2);
    const double eps = a.epsilon.value_or(0.5);
    require(eps > 0.0 && eps < L + 1, "analysis.epsilon", "must lie in (0, L + 1)");
  }
  if (sub == "det-moments") {
    require(a.p.value_or(1.0) > 0.0, "analysis.p", "must be > 0");
    if (a.t_list) {
      require(a.t_list->size() >= 2, "analysis.t_list", "needs at least two values");
      for (double t : *a.t_list) require(t > 0.0, "analysis.t_list", "entries must be > 0");
    }
  }
  if (sub == "density") {
    require(a.t.value_or(c.simulation.T) > 0.0, "analysis.t", "must be > 0");
    const bool any = a.grid_lo || a.grid_hi || a.grid_n;
    if (any) {
      require(a.grid_lo && a.grid_hi && a.grid_n, "analysis.grid_lo", "grid_lo, grid_hi and grid_n go together");
      const std::size_t d = static_cast<std::size_t>(c.model.dim);
      require(a.grid_lo->size() == d && a.grid_hi->size() == d && a.grid_n->size() == d, "analysis.grid_n",
              "one entry per coordinate");
      estimators::GridSpec g{*a.grid_lo, *a.grid_hi, {}};
      for (double v : *a.grid_n) {
        require(v >= 2 && v == std::floor(v), "analysis.grid_n", "entries must be integers >= 2");
        g.n.push_back(static_cast<std::size_t>(v));
      }
      g.validate();
    }
    if (a.bandwidth) require(a.bandwidth->size() == static_cast<std::size_t>(c.model.dim), "analysis.bandwidth",
                             "one entry per coordinate");
    if (a.N) require(*a.N >= 1, "analysis.N", "must be >= 1");
    if (a.M) require(*a.M > 0.0, "analysis.M", "must be > 0");
  }
  if (sub == "check-hormander") {
    require(a.box_n.value_or(5) >= 1, "analysis.box_n", "must be >= 1");
    require(a.box_hi.value_or(1.0) >= a.box_lo.value_or(-1.0), "analysis.box_hi", "must be >= box_lo");
  }
  if (sub == "probe-assumptions" && (a.probe_lo || a.probe_hi)) {
    const std::size_t d = static_cast<std::size_t>(c.model.dim);
    require(a.probe_lo && a.probe_hi && a.probe_lo->size() == d && a.probe_hi->size() == d, "analysis.probe_lo",
            "probe_lo and probe_hi need one entry per coordinate");
  }
}

RunResult run(std::string_view sub, const ExperimentConfig& config, const RunOptions& options) {
  RunResult res;
  try {
    validate_for(sub, config);
    res.config_hash = config_hash(config);
  } catch (const ConfigError& e) {
    res.exit_code = kExitConfig;
    res.message = e.what();
    return res;
  }
  const auto start = std::chrono::steady_clock::now();
  OutputSet out(options.out_dir);
  out.write("config.resolved.cfg", resolved_text(config));
  try {
    Context ctx(config, options, out);
    if (sub == "check-hormander") cmd_check_hormander(ctx);
    else if (sub == "simulate") cmd_simulate(ctx);
    else if (sub == "malliavin") cmd_malliavin(ctx);
    else if (sub == "tails") cmd_tails(ctx);
    else if (sub == "remainder-tails") cmd_remainder_tails(ctx);
    else if (sub == "det-moments") cmd_det_moments(ctx);
    else if (sub == "density") cmd_density(ctx);
    else cmd_probe(ctx);
    res.exit_code = ctx.exit_code;
    res.message = ctx.message;
  } catch (const ConfigError& e) {
    res.exit_code = kExitConfig;
    res.message = e.what();
  } catch (const ParseError& e) {
    res.exit_code = kExitConfig;
    res.message = e.what();
  } catch (const DivergenceError& e) {
    res.exit_code = kExitDivergence;
    res.message = e.what();
  } catch (const ConvergenceError& e) {
    res.exit_code = kExitDivergence;
    res.message = e.what();
  } catch (const NonFiniteError& e) {
    res.exit_code = kExitDivergence;
    res.message = e.what();
  } catch (const InvariantError& e) {
    res.exit_code = kExitInvariant;
    res.message = e.what();
  }
  ManifestInfo info;
  info.tool_version = tool_version();
  info.subcommand = std::string(sub);
  info.config_hash = res.config_hash;
  info.seed = config.simulation.seed;
  info.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  info.exit_code = res.exit_code;
  write_manifest(out, info);
  res.files = out.files();
  return res;
}

}  // namespace hypolab::harness
