#pragma once

// Field language: a small immutable expression AST over variables x1..xd,
// with a parser, pretty-printer, symbolic differentiation, simplification and
// two evaluators (a checked tree walk and a compiled postfix tape).

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hypolab::fieldlang {

enum class Op : std::uint8_t {
  Constant,
  Variable,
  Negate,
  Sin,
  Cos,
  Exp,
  Tanh,
  Add,
  Sub,
  Mul,
  Div,
  Pow,
};

bool is_unary(Op op) noexcept;
bool is_binary(Op op) noexcept;

/// Immutable expression handle. Copies share the underlying node.
class Expression {
public:
  /// Defaults to the constant 0.
  Expression();

  static Expression constant(double value);
  /// `index` is 1-based, matching the textual form x1..xd.
  static Expression variable(int index);
  static Expression unary(Op op, Expression operand);
  static Expression binary(Op op, Expression lhs, Expression rhs);
  static Expression power(Expression base, unsigned exponent);

  Op op() const noexcept;
  double value() const;               // Constant only
  int variable_index() const;         // Variable only
  unsigned exponent() const;          // Pow only
  std::size_t arity() const noexcept;
  const Expression& operand(std::size_t i) const;

  /// Node count of the tree (shared subtrees counted once per use).
  std::size_t size() const noexcept;
  /// Largest variable index referenced, 0 if none.
  int max_variable() const noexcept;

  bool is_constant() const noexcept { return op() == Op::Constant; }
  bool is_constant(double v) const noexcept { return is_constant() && value() == v; }

  bool same_node(const Expression& other) const noexcept { return node_ == other.node_; }

private:
  struct Node;
  explicit Expression(std::shared_ptr<const Node> node) : node_(std::move(node)) {}
  std::shared_ptr<const Node> node_;
};

bool structurally_equal(const Expression& a, const Expression& b);

Expression operator+(const Expression& a, const Expression& b);
Expression operator-(const Expression& a, const Expression& b);
Expression operator*(const Expression& a, const Expression& b);
Expression operator/(const Expression& a, const Expression& b);
Expression operator-(const Expression& a);

/// Grammar (see docs/fieldlang.md):
///   sum    := signed (('+' | '-') signed)*
///   signed := '-' signed | product
///   product:= factor (('*' | '/') factor)*
///   factor := '-' factor | power
///   power  := atom ('^' INTEGER)*
///   atom   := NUMBER | 'x' INDEX | FUNC '(' sum ')' | '(' sum ')'
/// Throws ParseError.
Expression parse_expression(std::string_view text, int dim);

/// Canonical text form; parse(to_string(e)) prints back to the same text.
std::string to_string(const Expression& e);

/// Partial derivative with respect to x_index (1-based). The result has the
/// local 0/1 identities already applied.
Expression differentiate(const Expression& e, int index);

/// Constant folding and 0/1 identities, applied to a fixpoint.
Expression simplify(const Expression& e);

/// Checked evaluation; throws NonFiniteError naming the first offending
/// subexpression (innermost).
double evaluate(const Expression& e, std::span<const double> point);

/// Postfix tape for repeated evaluation on hot paths. Non-finite results are
/// returned as-is; callers decide how to react.
class CompiledExpression {
public:
  CompiledExpression() = default;
  explicit CompiledExpression(const Expression& e);

  double operator()(std::span<const double> point) const noexcept;

  bool is_constant() const noexcept { return constant_; }

private:
  struct Instr {
    Op op;
    unsigned exponent;
    int variable;  // 0-based
    double value;
  };
  std::vector<Instr> tape_;
  std::size_t max_depth_ = 1;
  bool constant_ = true;
  bool folded_ = false;
  double constant_value_ = 0.0;
};

// ---------------------------------------------------------------------------

/// A vector field on R^d: d scalar component expressions.
class VectorField {
public:
  VectorField() = default;
  /// Throws ConfigError if any component references a variable beyond dim.
  VectorField(int dim, std::vector<Expression> components);

  static VectorField zero(int dim);
  static VectorField constant(std::span<const double> values);

  int dim() const noexcept { return dim_; }
  const Expression& operator[](std::size_t i) const { return components_.at(i); }
  const std::vector<Expression>& components() const noexcept { return components_; }
  std::size_t size() const noexcept;  // total node count

  std::vector<double> evaluate(std::span<const double> point) const;

private:
  int dim_ = 0;
  std::vector<Expression> components_;
};

VectorField parse_vector_field(std::span<const std::string> components, int dim);
VectorField simplify(const VectorField& v);
std::string to_string(const VectorField& v);

/// Row-major matrix of expressions.
struct ExpressionMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<Expression> entries;

  const Expression& operator()(int r, int c) const { return entries[static_cast<std::size_t>(r * cols + c)]; }
};

/// Entry (j, i) holds d v^j / d x_i, so jacobian(v) * w is the directional
/// derivative of v along w.
ExpressionMatrix jacobian(const VectorField& v);

/// Symbolic (dv) * w, component j = sum_i d v^j/d x_i * w^i.
VectorField directional_derivative(const VectorField& v, const VectorField& w);

/// Compiled form of several expressions evaluated together.
class CompiledField {
public:
  CompiledField() = default;
  explicit CompiledField(std::span<const Expression> exprs);
  explicit CompiledField(const VectorField& v) : CompiledField(std::span<const Expression>(v.components())) {}
  explicit CompiledField(const ExpressionMatrix& m) : CompiledField(std::span<const Expression>(m.entries)) {}

  std::size_t size() const noexcept { return parts_.size(); }
  /// Writes size() values into out. Returns false if any value is non-finite.
  bool evaluate(std::span<const double> point, std::span<double> out) const noexcept;

private:
  std::vector<CompiledExpression> parts_;
};

// ---------------------------------------------------------------------------

/// Coefficients of dX = b(X) dt + sigma(X) dW with sigma given column-wise.
class CoefficientSet {
public:
  CoefficientSet(VectorField drift, std::vector<VectorField> diffusion);

  /// Convenience: parse drift components and diffusion columns from text.
  static CoefficientSet parse(int dim, std::span<const std::string> drift,
                              const std::vector<std::vector<std::string>>& diffusion_columns);

  int dim() const noexcept { return drift_.dim(); }
  int noise_dim() const noexcept { return static_cast<int>(diffusion_.size()); }
  const VectorField& drift() const noexcept { return drift_; }
  /// Column k of sigma, 0-based (sigma^{k+1} in the usual 1-based notation).
  const VectorField& diffusion(int k) const { return diffusion_.at(static_cast<std::size_t>(k)); }
  const std::vector<VectorField>& diffusion_columns() const noexcept { return diffusion_; }

private:
  VectorField drift_;
  std::vector<VectorField> diffusion_;
};

}  // namespace hypolab::fieldlang
