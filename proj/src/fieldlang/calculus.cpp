#include "hypolab/errors.hpp"
#include "hypolab/fieldlang.hpp"

#include <cmath>
#include <stdexcept>

namespace hypolab::fieldlang {

namespace {

double ipow(double base, unsigned n) {
  double result = 1.0;
  while (n > 0) {
    if (n & 1u) result *= base;
    base *= base;
    n >>= 1u;
  }
  return result;
}

bool is_zero(const Expression& e) { return e.is_constant() && e.value() == 0.0; }
bool is_one(const Expression& e) { return e.is_constant(1.0); }

Expression fold_or(double v, Expression fallback) {
  if (v == 0.0) return Expression::constant(0.0);
  return std::isfinite(v) ? Expression::constant(v) : std::move(fallback);
}

// Smart constructors: each assumes its operands are already simplified, so a
// single bottom-up pass is usually a fixpoint.
Expression make_neg(const Expression& u) {
  if (u.is_constant()) return fold_or(-u.value(), Expression::unary(Op::Negate, u));
  if (u.op() == Op::Negate) return u.operand(0);
  return Expression::unary(Op::Negate, u);
}

Expression make_add(const Expression& a, const Expression& b) {
  if (a.is_constant() && b.is_constant()) return fold_or(a.value() + b.value(), Expression::binary(Op::Add, a, b));
  if (is_zero(a)) return b;
  if (is_zero(b)) return a;
  return Expression::binary(Op::Add, a, b);
}

Expression make_sub(const Expression& a, const Expression& b) {
  if (a.is_constant() && b.is_constant()) return fold_or(a.value() - b.value(), Expression::binary(Op::Sub, a, b));
  if (is_zero(b)) return a;
  if (is_zero(a)) return make_neg(b);
  if (structurally_equal(a, b)) return Expression::constant(0.0);
  return Expression::binary(Op::Sub, a, b);
}

Expression make_mul(const Expression& a, const Expression& b) {
  if (a.is_constant() && b.is_constant()) return fold_or(a.value() * b.value(), Expression::binary(Op::Mul, a, b));
  if (is_zero(a) || is_zero(b)) return Expression::constant(0.0);
  if (is_one(a)) return b;
  if (is_one(b)) return a;
  if (b.is_constant()) return make_mul(b, a);  // constants to the left
  if (a.is_constant(-1.0)) return make_neg(b);
  if (a.is_constant() && b.op() == Op::Mul && b.operand(0).is_constant()) {
    const double v = a.value() * b.operand(0).value();
    if (std::isfinite(v)) return make_mul(Expression::constant(v), b.operand(1));
  }
  return Expression::binary(Op::Mul, a, b);
}

Expression make_div(const Expression& a, const Expression& b) {
  if (a.is_constant() && b.is_constant() && b.value() != 0.0)
    return fold_or(a.value() / b.value(), Expression::binary(Op::Div, a, b));
  if (is_one(b)) return a;
  if (is_zero(a) && !(b.is_constant() && b.value() == 0.0)) return Expression::constant(0.0);
  return Expression::binary(Op::Div, a, b);
}

Expression make_pow(const Expression& base, unsigned n) {
  if (n == 0) return Expression::constant(1.0);
  if (n == 1) return base;
  if (base.is_constant()) return fold_or(ipow(base.value(), n), Expression::power(base, n));
  if (base.op() == Op::Pow) {
    const unsigned long long combined = static_cast<unsigned long long>(base.exponent()) * n;
    if (combined <= 0xffffffffull) return make_pow(base.operand(0), static_cast<unsigned>(combined));
  }
  return Expression::power(base, n);
}

Expression make_unary(Op op, const Expression& u) {
  if (op == Op::Negate) return make_neg(u);
  if (u.is_constant()) {
    double v = 0.0;
    switch (op) {
      case Op::Sin: v = std::sin(u.value()); break;
      case Op::Cos: v = std::cos(u.value()); break;
      case Op::Exp: v = std::exp(u.value()); break;
      case Op::Tanh: v = std::tanh(u.value()); break;
      default: break;
    }
    return fold_or(v, Expression::unary(op, u));
  }
  return Expression::unary(op, u);
}

Expression rebuild(const Expression& e, const Expression& a, const Expression& b) {
  switch (e.op()) {
    case Op::Add: return make_add(a, b);
    case Op::Sub: return make_sub(a, b);
    case Op::Mul: return make_mul(a, b);
    case Op::Div: return make_div(a, b);
    case Op::Pow: return make_pow(a, e.exponent());
    default: return make_unary(e.op(), a);
  }
}

Expression simplify_pass(const Expression& e) {
  switch (e.arity()) {
    case 0:
      return e;
    case 1: {
      Expression a = simplify_pass(e.operand(0));
      return rebuild(e, a, a);
    }
    default: {
      Expression a = simplify_pass(e.operand(0));
      Expression b = simplify_pass(e.operand(1));
      return rebuild(e, a, b);
    }
  }
}

}  // namespace

Expression simplify(const Expression& e) {
  Expression current = simplify_pass(e);
  for (int guard = 0; guard < 64; ++guard) {
    Expression next = simplify_pass(current);
    if (structurally_equal(next, current)) return current;
    current = std::move(next);
  }
  return current;
}

Expression differentiate(const Expression& e, int index) {
  if (index < 1) throw std::invalid_argument("differentiation index must be >= 1");
  if (e.max_variable() < index) return Expression::constant(0.0);
  switch (e.op()) {
    case Op::Constant:
      return Expression::constant(0.0);
    case Op::Variable:
      return Expression::constant(e.variable_index() == index ? 1.0 : 0.0);
    case Op::Negate:
      return make_neg(differentiate(e.operand(0), index));
    case Op::Sin: {
      const Expression& u = e.operand(0);
      return make_mul(make_unary(Op::Cos, u), differentiate(u, index));
    }
    case Op::Cos: {
      const Expression& u = e.operand(0);
      return make_neg(make_mul(make_unary(Op::Sin, u), differentiate(u, index)));
    }
    case Op::Exp: {
      const Expression& u = e.operand(0);
      return make_mul(e, differentiate(u, index));
    }
    case Op::Tanh: {
      const Expression& u = e.operand(0);
      Expression outer = make_sub(Expression::constant(1.0), make_pow(e, 2));
      return make_mul(outer, differentiate(u, index));
    }
    case Op::Add:
      return make_add(differentiate(e.operand(0), index), differentiate(e.operand(1), index));
    case Op::Sub:
      return make_sub(differentiate(e.operand(0), index), differentiate(e.operand(1), index));
    case Op::Mul: {
      const Expression& u = e.operand(0);
      const Expression& v = e.operand(1);
      return make_add(make_mul(differentiate(u, index), v), make_mul(u, differentiate(v, index)));
    }
    case Op::Div: {
      const Expression& u = e.operand(0);
      const Expression& v = e.operand(1);
      const Expression du = differentiate(u, index);
      const Expression dv = differentiate(v, index);
      if (is_zero(dv)) return make_div(du, v);
      return make_div(make_sub(make_mul(du, v), make_mul(u, dv)), make_pow(v, 2));
    }
    case Op::Pow: {
      const Expression& u = e.operand(0);
      const unsigned n = e.exponent();
      if (n == 0) return Expression::constant(0.0);
      Expression outer = make_mul(Expression::constant(static_cast<double>(n)), make_pow(u, n - 1));
      return make_mul(outer, differentiate(u, index));
    }
  }
  return Expression::constant(0.0);
}

// ---------------------------------------------------------------------------

VectorField::VectorField(int dim, std::vector<Expression> components) : dim_(dim), components_(std::move(components)) {
  if (dim < 1) throw ConfigError("vector field dimension must be >= 1");
  if (components_.size() != static_cast<std::size_t>(dim))
    throw ConfigError("vector field needs " + std::to_string(dim) + " components, got " +
                      std::to_string(components_.size()));
  for (const auto& c : components_)
    if (c.max_variable() > dim) throw ConfigError("component references x" + std::to_string(c.max_variable()) +
                                                  " in dimension " + std::to_string(dim));
}

VectorField VectorField::zero(int dim) {
  return VectorField(dim, std::vector<Expression>(static_cast<std::size_t>(dim), Expression::constant(0.0)));
}

VectorField VectorField::constant(std::span<const double> values) {
  std::vector<Expression> comps;
  for (double v : values) comps.push_back(Expression::constant(v));
  return VectorField(static_cast<int>(values.size()), std::move(comps));
}

std::size_t VectorField::size() const noexcept {
  std::size_t n = 0;
  for (const auto& c : components_) n += c.size();
  return n;
}

std::vector<double> VectorField::evaluate(std::span<const double> point) const {
  std::vector<double> out;
  out.reserve(components_.size());
  for (const auto& c : components_) out.push_back(fieldlang::evaluate(c, point));
  return out;
}

VectorField parse_vector_field(std::span<const std::string> components, int dim) {
  std::vector<Expression> exprs;
  exprs.reserve(components.size());
  for (const auto& text : components) exprs.push_back(parse_expression(text, dim));
  return VectorField(dim, std::move(exprs));
}

VectorField simplify(const VectorField& v) {
  std::vector<Expression> out;
  out.reserve(v.components().size());
  for (const auto& c : v.components()) out.push_back(simplify(c));
  return VectorField(v.dim(), std::move(out));
}

std::string to_string(const VectorField& v) {
  std::string out = "(";
  for (std::size_t i = 0; i < v.components().size(); ++i) {
    if (i) out += ", ";
    out += to_string(v.components()[i]);
  }
  return out + ")";
}

ExpressionMatrix jacobian(const VectorField& v) {
  ExpressionMatrix m;
  m.rows = v.dim();
  m.cols = v.dim();
  m.entries.reserve(static_cast<std::size_t>(m.rows * m.cols));
  for (int j = 0; j < v.dim(); ++j)
    for (int i = 0; i < v.dim(); ++i) m.entries.push_back(differentiate(v[static_cast<std::size_t>(j)], i + 1));
  return m;
}

VectorField directional_derivative(const VectorField& v, const VectorField& w) {
  if (v.dim() != w.dim()) throw std::invalid_argument("dimension mismatch in directional derivative");
  std::vector<Expression> out;
  out.reserve(static_cast<std::size_t>(v.dim()));
  for (int j = 0; j < v.dim(); ++j) {
    Expression acc = Expression::constant(0.0);
    for (int i = 0; i < v.dim(); ++i) {
      acc = make_add(acc, make_mul(differentiate(v[static_cast<std::size_t>(j)], i + 1), w[static_cast<std::size_t>(i)]));
    }
    out.push_back(simplify(acc));
  }
  return VectorField(v.dim(), std::move(out));
}

// ---------------------------------------------------------------------------

CoefficientSet::CoefficientSet(VectorField drift, std::vector<VectorField> diffusion)
    : drift_(std::move(drift)), diffusion_(std::move(diffusion)) {
  if (drift_.dim() < 1) throw ConfigError("drift must have dimension >= 1");
  if (diffusion_.empty()) throw ConfigError("at least one diffusion column is required (m >= 1)");
  for (const auto& col : diffusion_)
    if (col.dim() != drift_.dim()) throw ConfigError("diffusion column dimension differs from drift dimension");
}

CoefficientSet CoefficientSet::parse(int dim, std::span<const std::string> drift,
                                     const std::vector<std::vector<std::string>>& diffusion_columns) {
  VectorField b = parse_vector_field(drift, dim);
  std::vector<VectorField> cols;
  cols.reserve(diffusion_columns.size());
  for (const auto& col : diffusion_columns) cols.push_back(parse_vector_field(col, dim));
  return CoefficientSet(std::move(b), std::move(cols));
}

}  // namespace hypolab::fieldlang
