#include "hypolab/brackets.hpp"
#include "hypolab/errors.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

using namespace hypolab;
using namespace hypolab::brackets;
using fieldlang::parse_vector_field;

namespace {

VectorField field(std::vector<std::string> comps) {
  const int d = static_cast<int>(comps.size());
  return parse_vector_field(comps, d);
}

CoefficientSet heisenberg() { return CoefficientSet(field({"0", "x1"}), {field({"1", "0"})}); }
CoefficientSet ou() { return CoefficientSet(field({"-x1"}), {field({"1"})}); }

std::vector<double> eval(const VectorField& v, const std::vector<double>& p) { return v.evaluate(p); }

std::vector<double> random_point(std::mt19937_64& rng, int d) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<double> p(static_cast<std::size_t>(d));
  for (auto& v : p) v = u(rng);
  return p;
}

// Central-difference directional derivative (dv)(x) w.
std::vector<double> fd_directional(const VectorField& v, const std::vector<double>& x, const std::vector<double>& w) {
  const double h = 1e-5;
  std::vector<double> xp = x, xm = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xp[i] += h * w[i];
    xm[i] -= h * w[i];
  }
  auto a = eval(v, xp), b = eval(v, xm);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = (a[i] - b[i]) / (2 * h);
  return a;
}

// Ten smooth fields on R^3 for the bracket identities.
std::vector<VectorField> corpus() {
  return {
      field({"x2", "-x1", "0.5"}),
      field({"sin(x3)", "x1*x2", "1"}),
      field({"x1^2 - x2", "tanh(x3)", "x1"}),
      field({"exp(-x1^2)", "cos(x2)", "x3^2"}),
      field({"1", "0", "x1*x2"}),
      field({"x3", "x3*x1", "-x2"}),
      field({"0.3*x1 - x3", "2", "sin(x1*x2)"}),
      field({"tanh(x1 + x2)", "x3 - x1^3", "0"}),
      field({"cos(x1)*x3", "exp(0.2*x2)", "x1 - x2"}),
      field({"x2*x3", "x1*x3", "x1*x2"}),
  };
}

}  // namespace

TEST(MultiIndexTest, LengthWeightPrefix) {
  MultiIndex a{1, 0, 2, 0};
  EXPECT_EQ(a.length(), 4);
  EXPECT_EQ(a.weight(), 6);
  EXPECT_EQ(a.last(), 0);
  EXPECT_EQ(a.prefix(), (MultiIndex{1, 0, 2}));
  EXPECT_EQ(MultiIndex{}.weight(), 0);
  EXPECT_EQ(a.reversed(), (MultiIndex{0, 2, 0, 1}));
  EXPECT_THROW(MultiIndex{}.prefix(), std::logic_error);
}

TEST(Enumerate, Examples) {
  EXPECT_EQ(enumerate_indices(0, 3), std::vector<MultiIndex>{MultiIndex{}});
  EXPECT_EQ(enumerate_indices(1, 2), (std::vector<MultiIndex>{MultiIndex{}, MultiIndex{1}, MultiIndex{2}}));
  EXPECT_EQ(enumerate_indices(2, 1), (std::vector<MultiIndex>{MultiIndex{}, MultiIndex{0}, MultiIndex{1}, MultiIndex{1, 1}}));
}

TEST(Enumerate, MatchesBruteForce) {
  for (int m = 1; m <= 3; ++m) {
    for (int w = 0; w <= 5; ++w) {
      // brute force: every tuple over {0..m} of length <= w, filtered by weight
      std::set<std::vector<int>> expected{{}};
      std::vector<std::vector<int>> frontier{{}};
      for (int len = 1; len <= w; ++len) {
        std::vector<std::vector<int>> next;
        for (const auto& t : frontier)
          for (int j = 0; j <= m; ++j) {
            auto u = t;
            u.push_back(j);
            next.push_back(u);
            int weight = len;
            for (int e : u) weight += e == 0;
            if (weight <= w) expected.insert(u);
          }
        frontier = std::move(next);
      }
      auto got = enumerate_indices(w, m);
      std::set<std::vector<int>> got_set;
      for (const auto& a : got) {
        got_set.insert(a.entries());
        EXPECT_GE(a.weight(), a.length());
        EXPECT_LE(a.weight(), 2 * a.length());
      }
      EXPECT_EQ(got_set, expected) << "m=" << m << " w=" << w;
      EXPECT_EQ(got.size(), expected.size());
      for (std::size_t i = 1; i < got.size(); ++i) {
        const auto& p = got[i - 1];
        const auto& q = got[i];
        EXPECT_TRUE(p.length() < q.length() || (p.length() == q.length() && p < q));
      }
    }
  }
}

TEST(StratonovichDrift, Examples) {
  CoefficientSet constant_noise(field({"x1*x2", "sin(x1)"}), {field({"1", "2"}), field({"0", "3"})});
  VectorField s0 = stratonovich_drift(constant_noise);
  EXPECT_EQ(fieldlang::to_string(s0), "(x1*x2, sin(x1))");

  CoefficientSet geometric(field({"-x1"}), {field({"x1"})});
  VectorField g0 = stratonovich_drift(geometric);
  EXPECT_DOUBLE_EQ(eval(g0, {2.0})[0], -3.0);
  EXPECT_DOUBLE_EQ(eval(g0, {-0.4})[0], 0.6);

  CoefficientSet deg(field({"0", "0"}), {field({"x2", "0"})});
  VectorField d0 = stratonovich_drift(deg);
  std::mt19937_64 rng(3);
  for (int k = 0; k < 20; ++k) {
    auto x = random_point(rng, 2);
    auto sig = eval(deg.diffusion(0), x);
    auto fd = fd_directional(deg.diffusion(0), x, sig);
    auto got = eval(d0, x);
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(got[j], -0.5 * fd[j], 1e-8);
    EXPECT_EQ(got[0], 0.0);
    EXPECT_EQ(got[1], 0.0);
  }
}

TEST(LieBracket, Examples) {
  VectorField ax = field({"x1 + 2*x2", "-x1"});
  VectorField bx = field({"3*x2", "x1 - x2"});
  // A = [[1,2],[-1,0]], B = [[0,3],[1,-1]]; [Ax, Bx] = (BA - AB) x
  const double A[2][2] = {{1, 2}, {-1, 0}}, B[2][2] = {{0, 3}, {1, -1}};
  double C[2][2];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      C[i][j] = 0;
      for (int k = 0; k < 2; ++k) C[i][j] += B[i][k] * A[k][j] - A[i][k] * B[k][j];
    }
  VectorField br = lie_bracket(ax, bx);
  std::mt19937_64 rng(5);
  for (int t = 0; t < 10; ++t) {
    auto x = random_point(rng, 2);
    auto got = eval(br, x);
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(got[i], C[i][0] * x[0] + C[i][1] * x[1], 1e-12);
  }
  VectorField self = lie_bracket(bx, bx);
  EXPECT_EQ(fieldlang::to_string(self), "(0, 0)");
  VectorField e = lie_bracket(field({"1", "0"}), field({"0", "x1"}));
  EXPECT_EQ(fieldlang::to_string(e), "(0, 1)");
}

TEST(LieBracket, MatchesFiniteDifferenceFormula) {
  auto fields = corpus();
  std::mt19937_64 rng(11);
  for (std::size_t i = 0; i + 1 < fields.size(); ++i) {
    VectorField br = lie_bracket(fields[i], fields[i + 1]);
    for (int t = 0; t < 20; ++t) {
      auto x = random_point(rng, 3);
      auto du_v = fd_directional(fields[i + 1], x, eval(fields[i], x));
      auto dv_u = fd_directional(fields[i], x, eval(fields[i + 1], x));
      auto got = eval(br, x);
      for (int j = 0; j < 3; ++j) EXPECT_NEAR(got[j], du_v[j] - dv_u[j], 1e-6 * std::max(1.0, std::abs(got[j])));
    }
  }
}

TEST(LieBracket, AntisymmetryBilinearityJacobi) {
  auto fields = corpus();
  std::mt19937_64 rng(17);
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const auto& u = fields[i];
    const auto& v = fields[(i + 1) % fields.size()];
    const auto& w = fields[(i + 2) % fields.size()];
    VectorField uv = lie_bracket(u, v), vu = lie_bracket(v, u);
    std::vector<fieldlang::Expression> sum;
    for (int j = 0; j < 3; ++j) sum.push_back(fieldlang::Expression::constant(2.0) * v[j] + w[j]);
    VectorField lin = lie_bracket(u, VectorField(3, sum));
    VectorField uw = lie_bracket(u, w);
    VectorField j1 = lie_bracket(u, lie_bracket(v, w));
    VectorField j2 = lie_bracket(v, lie_bracket(w, u));
    VectorField j3 = lie_bracket(w, uv);
    for (int t = 0; t < 20; ++t) {
      auto x = random_point(rng, 3);
      auto a = eval(uv, x), b = eval(vu, x), l = eval(lin, x), c = eval(uw, x);
      auto p = eval(j1, x), q = eval(j2, x), r = eval(j3, x);
      for (int j = 0; j < 3; ++j) {
        const double scale = std::max(1.0, std::abs(a[j]));
        EXPECT_LE(std::abs(a[j] + b[j]) / scale, 1e-9);
        EXPECT_LE(std::abs(l[j] - (2 * a[j] + c[j])) / std::max(1.0, std::abs(l[j])), 1e-9);
        EXPECT_LE(std::abs(p[j] + q[j] + r[j]), 1e-7);
      }
    }
  }
}

TEST(BracketT, Examples) {
  CoefficientSet o = ou();
  EXPECT_EQ(fieldlang::to_string(bracket_T(MultiIndex{}, o.diffusion(0), o)), "(1)");
  EXPECT_EQ(fieldlang::to_string(bracket_T(MultiIndex{0}, o.diffusion(0), o)), "(1)");
  CoefficientSet h = heisenberg();
  EXPECT_EQ(fieldlang::to_string(bracket_T(MultiIndex{0}, h.diffusion(0), h)), "(0, -1)");

  BracketTable table(h, 3);
  EXPECT_EQ(fieldlang::to_string(table.get(1, MultiIndex{})), "(1, 0)");
  EXPECT_EQ(fieldlang::to_string(table.get(1, MultiIndex{0})), "(0, -1)");
  // table recursion agrees with the direct computation
  for (const auto& a : enumerate_indices(3, 1)) {
    EXPECT_EQ(fieldlang::to_string(table.get(1, a)), fieldlang::to_string(bracket_T(a, h.diffusion(0), h)));
    if (!a.empty()) {
      EXPECT_EQ(fieldlang::to_string(table.get(1, a)),
                fieldlang::to_string(lie_bracket(table.sigma(a.last()), table.get(1, a.prefix()))));
    }
  }
}

TEST(BracketTableTest, SizeCapAborts) {
  CoefficientSet c(field({"sin(x1*x2)*exp(x2)", "tanh(x1)*cos(x2)"}), {field({"x2^3", "sin(x1)"})});
  BracketTable::Options opts;
  opts.size_cap = 200;
  EXPECT_THROW(BracketTable(c, 6, opts), InvariantError);
}

TEST(Gram, ExamplesAndVL) {
  CoefficientSet elliptic(field({"0", "0"}), {field({"1", "0"}), field({"0", "1"})});
  BracketTable et(elliptic, 0);
  std::vector<double> x{0.3, -1.2};
  EXPECT_TRUE(gram_matrix(x, 1, et).isApprox(Eigen::MatrixXd::Identity(2, 2)));
  EXPECT_EQ(v_L(x, 1, et), 1.0);

  BracketTable ht(heisenberg(), 2);
  Eigen::MatrixXd m1 = gram_matrix(x, 1, ht);
  EXPECT_EQ(m1(0, 0), 1.0);
  EXPECT_EQ(m1(1, 1), 0.0);
  EXPECT_EQ(v_L(x, 1, ht), 0.0);
  Eigen::MatrixXd m3 = gram_matrix(x, 3, ht);
  EXPECT_TRUE(m3.isApprox(Eigen::MatrixXd::Identity(2, 2)));
  EXPECT_EQ(v_L(x, 3, ht), 1.0);
}

TEST(Gram, EigenvalueMatchesSphereMinimisation) {
  CoefficientSet c(field({"x2", "-x1 - x2^3"}), {field({"0", "1 + 0.5*sin(x1)"})});
  BracketTable table(c, 3);
  std::mt19937_64 rng(23);
  std::normal_distribution<double> n01;
  for (int t = 0; t < 5; ++t) {
    auto x = random_point(rng, 2);
    for (int L = 1; L <= 4; ++L) {
      Eigen::MatrixXd m = gram_matrix(x, L, table);
      EXPECT_TRUE(m.isApprox(m.transpose()));
      const double lmin = smallest_eigenvalue(m);
      EXPECT_GE(lmin, -1e-10);
      double best = std::numeric_limits<double>::infinity();
      for (int k = 0; k < 10000; ++k) {
        Eigen::Vector2d eta(n01(rng), n01(rng));
        eta.normalize();
        best = std::min(best, eta.dot(m * eta));
      }
      // random sampling approaches the minimum from above
      EXPECT_GE(best, lmin - 1e-9);
      EXPECT_LE(best - lmin, 1e-3 * std::max(1.0, m.norm()));
    }
    // V_L non-decreasing in L
    for (int L = 1; L < 4; ++L) EXPECT_LE(v_L(x, L, table), v_L(x, L + 1, table) + 1e-12);
  }
}

TEST(Gram, SphereMinimisationHitsEigenvalueIn2D) {
  // In d = 2 the unit circle can be scanned densely, which pins the 1e-9 match.
  CoefficientSet c(field({"x2", "-x1"}), {field({"1", "x1"})});
  BracketTable table(c, 2);
  std::vector<double> x{0.4, -0.9};
  Eigen::MatrixXd m = gram_matrix(x, 3, table);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const double lmin = es.eigenvalues()(0);
  const Eigen::Vector2d v = es.eigenvectors().col(0);
  const double theta0 = std::atan2(v(1), v(0));
  double best = std::numeric_limits<double>::infinity();
  for (int k = -5000; k <= 5000; ++k) {
    const double th = theta0 + 1e-6 * k;
    Eigen::Vector2d eta(std::cos(th), std::sin(th));
    best = std::min(best, eta.dot(m * eta));
  }
  EXPECT_NEAR(best, lmin, 1e-9);
}

TEST(Hormander, Reports) {
  BracketTable ht(heisenberg(), 2);
  auto grid = tensor_grid(2, -2.0, 2.0, 21);
  ASSERT_EQ(grid.size(), 441u);
  HormanderReport r3 = check_hormander(grid, 3, ht);
  EXPECT_EQ(r3.inf_v_l, 1.0);
  EXPECT_TRUE(r3.uh_surrogate);
  ASSERT_TRUE(r3.l0_candidate.has_value());
  EXPECT_EQ(*r3.l0_candidate, 3);
  EXPECT_EQ(r3.inf_by_level[1], 0.0);
  EXPECT_EQ(r3.inf_by_level[0], 0.0);
  EXPECT_FALSE(r3.caveat.empty());

  CoefficientSet zero(field({"x2", "x1"}), {field({"0", "0"})});
  BracketTable zt(zero, 3);
  HormanderReport rz = check_hormander(grid, 4, zt);
  EXPECT_EQ(rz.inf_v_l, 0.0);
  EXPECT_FALSE(rz.uh_surrogate);
  EXPECT_FALSE(rz.l0_candidate.has_value());
  for (const auto& p : rz.points) EXPECT_FALSE(p.in_u_l);

  CoefficientSet mult(field({"0"}), {field({"x1"})});
  BracketTable mt(mult, 0);
  HormanderReport rm = check_hormander({{0.0}, {1.0}, {0.5}}, 1, mt);
  EXPECT_EQ(rm.points[0].v_l, 0.0);
  EXPECT_FALSE(rm.points[0].in_u_l);
  EXPECT_EQ(rm.points[1].v_l, 1.0);
  EXPECT_TRUE(rm.points[1].in_u_l);
  EXPECT_DOUBLE_EQ(rm.points[2].v_l, 0.25);

  EXPECT_THROW(check_hormander({}, 1, mt), ConfigError);
}

TEST(LocalM, Examples) {
  CoefficientSet constant(field({"0"}), {field({"1"})});
  std::vector<double> x0{0.0};
  LocalNormRequest req;
  req.variant = LocalNormVariant::BracketHierarchy;
  req.L = 1;
  EXPECT_EQ(local_M_of_x(x0, constant, req).value, 1.0);
  req.variant = LocalNormVariant::DensityRegion;
  EXPECT_EQ(local_M_of_x(x0, constant, req).value, 1.0);

  CoefficientSet cubic(field({"-x1^3"}), {field({"1"})});
  EXPECT_EQ(local_M_of_x(x0, cubic, req).value, 1.0);
  std::vector<double> x2{2.0};
  EXPECT_EQ(local_M_of_x(x2, cubic, req).value, 27.0);
}

TEST(LocalM, MonotoneInSampleCount) {
  CoefficientSet c(field({"x2*sin(x1)", "-x1^3"}), {field({"tanh(x2)", "1"})});
  std::vector<double> x{0.3, 1.1};
  for (auto variant : {LocalNormVariant::DensityRegion, LocalNormVariant::BracketHierarchy,
                       LocalNormVariant::RemainderExpansion}) {
    double prev = 0.0;
    for (std::size_t n : {8u, 32u, 128u, 512u}) {
      LocalNormRequest req;
      req.variant = variant;
      req.L = 1;
      req.n_ball = n;
      BallNorm r = local_M_of_x(x, c, req);
      EXPECT_EQ(r.samples, n);
      EXPECT_GE(r.value, prev);
      prev = r.value;
    }
  }
  auto pts = ball_points(x, 1.0, 300);
  for (const auto& p : pts) EXPECT_LE(std::hypot(p[0] - x[0], p[1] - x[1]), 1.0 + 1e-15);
}

TEST(LocalM, NonFiniteInsideBall) {
  CoefficientSet c(field({"1/x1"}), {field({"1"})});
  std::vector<double> x{0.5};
  LocalNormRequest req;
  EXPECT_THROW(local_M_of_x(x, c, req), NonFiniteError);
}
