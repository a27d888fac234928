#include "hypolab/errors.hpp"
#include "hypolab/fieldlang.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

using namespace hypolab;
using namespace hypolab::fieldlang;

namespace {

// Smooth test corpus in d = 3 (no division, so every point of [-2,2]^3 is valid).
const std::vector<std::string> kSmoothCorpus = {
    "x1^2 + sin(x2)",
    "x1 - x1^3",
    "tanh(x1*x2) + cos(x3)",
    "exp(-x1^2)*x2",
    "x1*x2*x3 - 2.5*x2^2",
    "sin(x1 + x2*x3)^2",
    "-(x1 - x2)*exp(0.3*x3)",
    "tanh(x1)^3 - x3",
    "cos(x1)*sin(x2)*tanh(x3)",
    "1.5 + x1*x1*x1*x2 - x3^4",
};

std::vector<double> random_point(std::mt19937_64& rng, int d, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> p(static_cast<std::size_t>(d));
  for (auto& v : p) v = u(rng);
  return p;
}

double central_difference(const Expression& e, std::vector<double> p, int index, double step) {
  const std::size_t k = static_cast<std::size_t>(index - 1);
  const double x = p[k];
  p[k] = x + step;
  const double fp = evaluate(e, p);
  p[k] = x - step;
  const double fm = evaluate(e, p);
  return (fp - fm) / (2.0 * step);
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

}  // namespace

TEST(Parse, PrecedenceAndShape) {
  Expression e = parse_expression("x1^2 + sin(x2)", 2);
  ASSERT_EQ(e.op(), Op::Add);
  EXPECT_EQ(e.operand(0).op(), Op::Pow);
  EXPECT_EQ(e.operand(0).exponent(), 2u);
  EXPECT_EQ(e.operand(0).operand(0).variable_index(), 1);
  EXPECT_EQ(e.operand(1).op(), Op::Sin);
  EXPECT_EQ(e.operand(1).operand(0).variable_index(), 2);
}

TEST(Parse, GinzburgLandauDriftShape) {
  Expression e = parse_expression("-x1*x1*x1 + x1", 1);
  ASSERT_EQ(e.op(), Op::Add);
  const Expression& neg = e.operand(0);
  ASSERT_EQ(neg.op(), Op::Negate);
  const Expression& cube = neg.operand(0);
  ASSERT_EQ(cube.op(), Op::Mul);
  ASSERT_EQ(cube.operand(0).op(), Op::Mul);
  EXPECT_EQ(cube.operand(0).operand(0).variable_index(), 1);
  EXPECT_EQ(cube.operand(1).variable_index(), 1);
  EXPECT_EQ(e.operand(1).variable_index(), 1);
  const std::vector<double> p{1.7};
  EXPECT_DOUBLE_EQ(evaluate(e, p), 1.7 - 1.7 * 1.7 * 1.7);
}

TEST(Parse, LeftAssociativity) {
  Expression e = parse_expression("x1 - x2 - x3", 3);
  ASSERT_EQ(e.op(), Op::Sub);
  EXPECT_EQ(e.operand(0).op(), Op::Sub);
  const std::vector<double> p{1, 2, 3};
  EXPECT_EQ(evaluate(e, p), -4.0);
  EXPECT_EQ(evaluate(parse_expression("8/x2/x2", 2), std::vector<double>{0, 2}), 2.0);
  EXPECT_EQ(evaluate(parse_expression("-x1^2", 1), std::vector<double>{3}), -9.0);
  EXPECT_EQ(evaluate(parse_expression("x1*-x1", 1), std::vector<double>{3}), -9.0);
}

TEST(Parse, WhitespaceInsensitive) {
  Expression a = parse_expression("x1^2+sin( x2 )", 2);
  Expression b = parse_expression("  x1 ^ 2 +\tsin(x2)  ", 2);
  EXPECT_TRUE(structurally_equal(a, b));
}

TEST(Parse, Errors) {
  EXPECT_THROW(parse_expression("x3", 2), ParseError);
  EXPECT_THROW(parse_expression("x0", 2), ParseError);
  EXPECT_THROW(parse_expression("y1", 2), ParseError);
  EXPECT_THROW(parse_expression("log(x1)", 2), ParseError);
  EXPECT_THROW(parse_expression("x1^2.5", 2), ParseError);
  EXPECT_THROW(parse_expression("x1^-1", 2), ParseError);
  EXPECT_THROW(parse_expression("x1^x2", 2), ParseError);
  EXPECT_THROW(parse_expression("", 2), ParseError);
  EXPECT_THROW(parse_expression("(x1 + 1", 2), ParseError);
  EXPECT_THROW(parse_expression("x1 +", 2), ParseError);
  EXPECT_THROW(parse_expression("sin x1", 2), ParseError);
  try {
    parse_expression("x1 + x5", 2);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 5u);
  }
}

TEST(Print, RoundTripIsFixedPoint) {
  std::vector<std::string> texts = kSmoothCorpus;
  texts.insert(texts.end(), {"-x1*x1*x1 + x1", "x1*(-x2)", "(-x1)^2", "-(x1 + x2)", "x1 - (x2 - x3)",
                             "x1/(x2*x3)", "-3*x1", "x1 + -2", "--x1", "1e-20*x2", "(x1^2)^3"});
  for (const auto& text : texts) {
    const std::string once = to_string(parse_expression(text, 3));
    const std::string twice = to_string(parse_expression(once, 3));
    EXPECT_EQ(once, twice) << text;
  }
  // Printed forms of simplified derivatives (negative constants included) too.
  for (const auto& text : kSmoothCorpus) {
    for (int i = 1; i <= 3; ++i) {
      const std::string once = to_string(differentiate(parse_expression(text, 3), i));
      EXPECT_EQ(once, to_string(parse_expression(once, 3))) << text;
    }
  }
}

TEST(Differentiate, Examples) {
  Expression e = parse_expression("x1^2 + sin(x2)", 2);
  EXPECT_EQ(to_string(simplify(differentiate(e, 1))), "2*x1");
  EXPECT_EQ(to_string(simplify(differentiate(parse_expression("tanh(x1)", 1), 1))), "1 - tanh(x1)^2");
  EXPECT_EQ(to_string(simplify(differentiate(parse_expression("x2", 2), 1))), "0");
}

TEST(Differentiate, MatchesCentralDifferences) {
  std::mt19937_64 rng(12345);
  for (const auto& text : kSmoothCorpus) {
    Expression e = parse_expression(text, 3);
    for (int i = 1; i <= 3; ++i) {
      Expression de = differentiate(e, i);
      for (int k = 0; k < 100; ++k) {
        auto p = random_point(rng, 3);
        EXPECT_LE(rel_err(evaluate(de, p), central_difference(e, p, i, 1e-5)), 1e-6) << text << " d/dx" << i;
      }
    }
  }
}

TEST(Differentiate, QuotientRule) {
  Expression e = parse_expression("sin(x1)/(2 + x2^2)", 2);
  Expression d2 = differentiate(e, 2);
  const std::vector<double> p{0.7, -1.3};
  const double expected = -std::sin(0.7) * 2 * -1.3 / std::pow(2 + 1.69, 2);
  EXPECT_NEAR(evaluate(d2, p), expected, 1e-14);
}

TEST(Simplify, IdentitiesAndFolding) {
  auto s = [](const char* text) { return to_string(simplify(parse_expression(text, 2))); };
  EXPECT_EQ(s("x1 + 0"), "x1");
  EXPECT_EQ(s("0 + x1"), "x1");
  EXPECT_EQ(s("x1*1"), "x1");
  EXPECT_EQ(s("1*x1"), "x1");
  EXPECT_EQ(s("x1*0"), "0");
  EXPECT_EQ(s("x1^0"), "1");
  EXPECT_EQ(s("x1^1"), "x1");
  EXPECT_EQ(s("2*3 + 4"), "10");
  EXPECT_EQ(s("sin(0)*x2 + x1"), "x1");
  EXPECT_EQ(s("x1/1"), "x1");
  EXPECT_EQ(s("--x2"), "x2");
}

TEST(Simplify, IdempotentAndEvaluationEquivalent) {
  std::mt19937_64 rng(7);
  for (const auto& text : kSmoothCorpus) {
    Expression e = parse_expression(text, 3);
    for (int i = 1; i <= 3; ++i) {
      Expression raw = differentiate(e, i);
      Expression once = simplify(raw);
      EXPECT_TRUE(structurally_equal(once, simplify(once))) << text;
      // differentiate commutes with simplify up to evaluation equivalence
      Expression other = simplify(differentiate(simplify(e), i));
      for (int k = 0; k < 20; ++k) {
        auto p = random_point(rng, 3);
        EXPECT_LE(rel_err(evaluate(once, p), evaluate(raw, p)), 1e-12);
        EXPECT_LE(rel_err(evaluate(other, p), evaluate(once, p)), 1e-9);
      }
    }
  }
}

TEST(Evaluate, ExamplesAndErrors) {
  EXPECT_EQ(evaluate(parse_expression("x1^2 + sin(x2)", 2), std::vector<double>{2.0, 0.0}), 4.0);
  EXPECT_NEAR(evaluate(parse_expression("exp(x1)", 1), std::vector<double>{1.0}), std::exp(1.0), 1e-12);
  try {
    evaluate(parse_expression("2 + 1/(x1)", 1), std::vector<double>{0.0});
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.subexpression(), "1/x1");
  }
  EXPECT_THROW(evaluate(parse_expression("exp(x1)^40", 1), std::vector<double>{800.0}), NonFiniteError);
}

TEST(Compiled, AgreesWithTreeEvaluation) {
  std::mt19937_64 rng(99);
  for (const auto& text : kSmoothCorpus) {
    Expression e = parse_expression(text, 3);
    CompiledExpression c(e);
    for (int k = 0; k < 50; ++k) {
      auto p = random_point(rng, 3);
      EXPECT_EQ(c(p), evaluate(e, p)) << text;
    }
  }
  CompiledExpression k(parse_expression("2*3", 1));
  EXPECT_TRUE(k.is_constant());
  EXPECT_EQ(k(std::vector<double>{5.0}), 6.0);
}

TEST(Jacobian, OrientationAndExamples) {
  std::vector<std::string> v{"x1*x2", "x1"};
  VectorField f = parse_vector_field(v, 2);
  ExpressionMatrix j = jacobian(f);
  EXPECT_EQ(to_string(j(0, 0)), "x2");
  EXPECT_EQ(to_string(j(0, 1)), "x1");
  EXPECT_EQ(to_string(j(1, 0)), "1");
  EXPECT_EQ(to_string(j(1, 1)), "0");

  std::vector<std::string> lin{"2*x1 - x2", "0.5*x2 + 3*x1"};
  ExpressionMatrix a = jacobian(parse_vector_field(lin, 2));
  const double expected[2][2] = {{2, -1}, {3, 0.5}};
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      ASSERT_TRUE(a(r, c).is_constant());
      EXPECT_EQ(a(r, c).value(), expected[r][c]);
    }
}

TEST(Jacobian, MatchesFiniteDifferencesOnCorpus) {
  std::mt19937_64 rng(2024);
  // vector fields built from consecutive triples of the corpus
  for (std::size_t start = 0; start < kSmoothCorpus.size(); ++start) {
    std::vector<std::string> comps;
    for (std::size_t k = 0; k < 3; ++k) comps.push_back(kSmoothCorpus[(start + k) % kSmoothCorpus.size()]);
    VectorField f = parse_vector_field(comps, 3);
    ExpressionMatrix jac = jacobian(f);
    for (int trial = 0; trial < 100; ++trial) {
      auto p = random_point(rng, 3);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
          EXPECT_LE(rel_err(evaluate(jac(r, c), p), central_difference(f[static_cast<std::size_t>(r)], p, c + 1, 1e-5)), 1e-6);
    }
  }
}

TEST(VectorFieldTest, Validation) {
  std::vector<std::string> one{"x1"};
  EXPECT_THROW(VectorField(2, {parse_expression("x1", 2)}), ConfigError);
  EXPECT_THROW(CoefficientSet(parse_vector_field(one, 1), {}), ConfigError);
  std::vector<std::string> two{"x1", "x2"};
  EXPECT_THROW(CoefficientSet(parse_vector_field(one, 1), {parse_vector_field(two, 2)}), ConfigError);
  CoefficientSet ok(parse_vector_field(one, 1), {VectorField::constant(std::vector<double>{1.0})});
  EXPECT_EQ(ok.dim(), 1);
  EXPECT_EQ(ok.noise_dim(), 1);
}
