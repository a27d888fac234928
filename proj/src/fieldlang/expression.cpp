#include "hypolab/errors.hpp"
#include "hypolab/fieldlang.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <stdexcept>

namespace hypolab::fieldlang {

struct Expression::Node {
  Op op = Op::Constant;
  double value = 0.0;
  int variable = 0;
  unsigned exponent = 0;
  std::array<Expression, 2> children;
  std::size_t size = 1;
  int max_variable = 0;
};

bool is_unary(Op op) noexcept {
  switch (op) {
    case Op::Negate:
    case Op::Sin:
    case Op::Cos:
    case Op::Exp:
    case Op::Tanh:
    case Op::Pow:
      return true;
    default:
      return false;
  }
}

bool is_binary(Op op) noexcept {
  return op == Op::Add || op == Op::Sub || op == Op::Mul || op == Op::Div;
}

// Leaf nodes carry null child handles; only the checked accessors read them.
Expression::Expression() {
  static const std::shared_ptr<const Node> zero = [] {
    return std::shared_ptr<const Node>(new Node{Op::Constant, 0.0, 0, 0, {Expression(nullptr), Expression(nullptr)}, 1, 0});
  }();
  node_ = zero;
}

Expression Expression::constant(double value) {
  auto n = std::make_shared<Node>(Node{Op::Constant, value, 0, 0, {Expression(nullptr), Expression(nullptr)}, 1, 0});
  return Expression(std::move(n));
}

Expression Expression::variable(int index) {
  if (index < 1) throw std::invalid_argument("variable index must be >= 1");
  auto n = std::make_shared<Node>(Node{Op::Variable, 0.0, index, 0, {Expression(nullptr), Expression(nullptr)}, 1, index});
  return Expression(std::move(n));
}

Expression Expression::unary(Op op, Expression operand) {
  if (!is_unary(op) || op == Op::Pow) throw std::invalid_argument("not a unary operator");
  const std::size_t sz = operand.size() + 1;
  const int mv = operand.max_variable();
  auto n = std::make_shared<Node>(Node{op, 0.0, 0, 0, {std::move(operand), Expression(nullptr)}, sz, mv});
  return Expression(std::move(n));
}

Expression Expression::binary(Op op, Expression lhs, Expression rhs) {
  if (!is_binary(op)) throw std::invalid_argument("not a binary operator");
  const std::size_t sz = lhs.size() + rhs.size() + 1;
  const int mv = std::max(lhs.max_variable(), rhs.max_variable());
  auto n = std::make_shared<Node>(Node{op, 0.0, 0, 0, {std::move(lhs), std::move(rhs)}, sz, mv});
  return Expression(std::move(n));
}

Expression Expression::power(Expression base, unsigned exponent) {
  const std::size_t sz = base.size() + 1;
  const int mv = base.max_variable();
  auto n = std::make_shared<Node>(Node{Op::Pow, 0.0, 0, exponent, {std::move(base), Expression(nullptr)}, sz, mv});
  return Expression(std::move(n));
}

Op Expression::op() const noexcept { return node_->op; }

double Expression::value() const {
  if (node_->op != Op::Constant) throw std::logic_error("value() on non-constant");
  return node_->value;
}

int Expression::variable_index() const {
  if (node_->op != Op::Variable) throw std::logic_error("variable_index() on non-variable");
  return node_->variable;
}

unsigned Expression::exponent() const {
  if (node_->op != Op::Pow) throw std::logic_error("exponent() on non-power");
  return node_->exponent;
}

std::size_t Expression::arity() const noexcept {
  if (is_binary(node_->op)) return 2;
  if (is_unary(node_->op)) return 1;
  return 0;
}

const Expression& Expression::operand(std::size_t i) const {
  if (i >= arity()) throw std::out_of_range("operand index");
  return node_->children[i];
}

std::size_t Expression::size() const noexcept { return node_ ? node_->size : 0; }
int Expression::max_variable() const noexcept { return node_ ? node_->max_variable : 0; }

bool structurally_equal(const Expression& a, const Expression& b) {
  if (a.same_node(b)) return true;
  if (a.op() != b.op() || a.size() != b.size()) return false;
  switch (a.op()) {
    case Op::Constant:
      return a.value() == b.value() && std::signbit(a.value()) == std::signbit(b.value());
    case Op::Variable:
      return a.variable_index() == b.variable_index();
    case Op::Pow:
      return a.exponent() == b.exponent() && structurally_equal(a.operand(0), b.operand(0));
    default:
      for (std::size_t i = 0; i < a.arity(); ++i)
        if (!structurally_equal(a.operand(i), b.operand(i))) return false;
      return true;
  }
}

// ---------------------------------------------------------------------------
// Printing

namespace {

bool negative_constant(const Expression& e) {
  return e.is_constant() && std::signbit(e.value());
}

bool prints_as_negation(const Expression& e) {
  return e.op() == Op::Negate || negative_constant(e);
}

std::string format_number(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw std::runtime_error("number formatting failed");
  return std::string(buf.data(), ptr);
}

const char* function_name(Op op) {
  switch (op) {
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Exp: return "exp";
    case Op::Tanh: return "tanh";
    default: return nullptr;
  }
}

void print(const Expression& e, std::string& out);

void print_wrapped(const Expression& e, bool wrap, std::string& out) {
  if (wrap) out += '(';
  print(e, out);
  if (wrap) out += ')';
}

void print(const Expression& e, std::string& out) {
  switch (e.op()) {
    case Op::Constant:
      if (std::signbit(e.value())) {
        out += '-';
        out += format_number(-e.value());
      } else {
        out += format_number(e.value());
      }
      return;
    case Op::Variable:
      out += 'x';
      out += std::to_string(e.variable_index());
      return;
    case Op::Negate: {
      const Expression& u = e.operand(0);
      out += '-';
      const bool wrap = u.op() == Op::Add || u.op() == Op::Sub || prints_as_negation(u);
      print_wrapped(u, wrap, out);
      return;
    }
    case Op::Sin:
    case Op::Cos:
    case Op::Exp:
    case Op::Tanh:
      out += function_name(e.op());
      out += '(';
      print(e.operand(0), out);
      out += ')';
      return;
    case Op::Add:
    case Op::Sub: {
      print(e.operand(0), out);
      out += e.op() == Op::Add ? " + " : " - ";
      const Expression& r = e.operand(1);
      print_wrapped(r, r.op() == Op::Add || r.op() == Op::Sub, out);
      return;
    }
    case Op::Mul:
    case Op::Div: {
      const Expression& l = e.operand(0);
      const Expression& r = e.operand(1);
      print_wrapped(l, l.op() == Op::Add || l.op() == Op::Sub || prints_as_negation(l), out);
      out += e.op() == Op::Mul ? "*" : "/";
      print_wrapped(r,
                    r.op() == Op::Add || r.op() == Op::Sub || r.op() == Op::Mul || r.op() == Op::Div ||
                        prints_as_negation(r),
                    out);
      return;
    }
    case Op::Pow: {
      const Expression& b = e.operand(0);
      const bool atomic = b.op() == Op::Variable || (b.is_constant() && !std::signbit(b.value())) ||
                          function_name(b.op()) != nullptr;
      print_wrapped(b, !atomic, out);
      out += '^';
      out += std::to_string(e.exponent());
      return;
    }
  }
}

}  // namespace

std::string to_string(const Expression& e) {
  std::string out;
  print(e, out);
  return out;
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

class Parser {
public:
  Parser(std::string_view text, int dim) : text_(text), dim_(dim) {}

  Expression parse() {
    skip_ws();
    if (pos_ >= text_.size()) throw ParseError(pos_, "empty expression");
    Expression e = sum();
    skip_ws();
    if (pos_ < text_.size()) throw ParseError(pos_, std::string("unexpected character '") + text_[pos_] + "'");
    return e;
  }

private:
  void skip_ws() {
    while (pos_ < text_.size() && (text_[pos_] == ' ' || text_[pos_] == '\t' || text_[pos_] == '\n' || text_[pos_] == '\r'))
      ++pos_;
  }

  bool accept(char c) {
    skip_ws();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  char peek() {
    skip_ws();
    return pos_ < text_.size() ? text_[pos_] : '\0';
  }

  Expression sum() {
    Expression lhs = signed_term();
    for (;;) {
      if (accept('+')) {
        lhs = Expression::binary(Op::Add, lhs, signed_term());
      } else if (accept('-')) {
        lhs = Expression::binary(Op::Sub, lhs, signed_term());
      } else {
        return lhs;
      }
    }
  }

  Expression signed_term() {
    if (accept('-')) return Expression::unary(Op::Negate, signed_term());
    return product();
  }

  Expression product() {
    Expression lhs = factor();
    for (;;) {
      if (accept('*')) {
        lhs = Expression::binary(Op::Mul, lhs, factor());
      } else if (accept('/')) {
        lhs = Expression::binary(Op::Div, lhs, factor());
      } else {
        return lhs;
      }
    }
  }

  Expression factor() {
    if (accept('-')) return Expression::unary(Op::Negate, factor());
    return power();
  }

  Expression power() {
    Expression base = atom();
    while (accept('^')) {
      skip_ws();
      const std::size_t start = pos_;
      if (pos_ < text_.size() && text_[pos_] == '-') throw ParseError(pos_, "negative power exponent");
      if (pos_ >= text_.size() || !is_digit(text_[pos_])) throw ParseError(pos_, "power exponent must be an integer literal");
      while (pos_ < text_.size() && is_digit(text_[pos_])) ++pos_;
      if (pos_ < text_.size() && (text_[pos_] == '.' || text_[pos_] == 'e' || text_[pos_] == 'E'))
        throw ParseError(start, "non-integer power exponent");
      unsigned exponent = 0;
      auto [ptr, ec] = std::from_chars(text_.data() + start, text_.data() + pos_, exponent);
      if (ec != std::errc() || ptr != text_.data() + pos_) throw ParseError(start, "power exponent out of range");
      base = Expression::power(base, exponent);
    }
    return base;
  }

  static bool is_digit(char c) { return c >= '0' && c <= '9'; }
  static bool is_alpha(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_'; }

  Expression atom() {
    skip_ws();
    if (pos_ >= text_.size()) throw ParseError(pos_, "unexpected end of input");
    const char c = text_[pos_];
    if (c == '(') {
      ++pos_;
      Expression inner = sum();
      if (!accept(')')) throw ParseError(pos_, "expected ')'");
      return inner;
    }
    if (is_digit(c) || c == '.') return number();
    if (is_alpha(c)) return identifier();
    throw ParseError(pos_, std::string("unexpected character '") + c + "'");
  }

  Expression number() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() && is_digit(text_[pos_])) ++pos_;
    if (pos_ < text_.size() && text_[pos_] == '.') {
      ++pos_;
      while (pos_ < text_.size() && is_digit(text_[pos_])) ++pos_;
    }
    if (pos_ < text_.size() && (text_[pos_] == 'e' || text_[pos_] == 'E')) {
      std::size_t p = pos_ + 1;
      if (p < text_.size() && (text_[p] == '+' || text_[p] == '-')) ++p;
      if (p < text_.size() && is_digit(text_[p])) {
        pos_ = p;
        while (pos_ < text_.size() && is_digit(text_[pos_])) ++pos_;
      }
    }
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(text_.data() + start, text_.data() + pos_, v);
    if (ec != std::errc() || ptr != text_.data() + pos_ || !std::isfinite(v))
      throw ParseError(start, "malformed number '" + std::string(text_.substr(start, pos_ - start)) + "'");
    return Expression::constant(v);
  }

  Expression identifier() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() && (is_alpha(text_[pos_]) || is_digit(text_[pos_]))) ++pos_;
    const std::string_view name = text_.substr(start, pos_ - start);

    if (name.size() >= 2 && name[0] == 'x' &&
        std::all_of(name.begin() + 1, name.end(), [](char ch) { return is_digit(ch); })) {
      int index = 0;
      auto [ptr, ec] = std::from_chars(name.data() + 1, name.data() + name.size(), index);
      if (ec != std::errc() || index < 1 || index > dim_)
        throw ParseError(start, "variable index out of range: '" + std::string(name) + "' (dimension " +
                                    std::to_string(dim_) + ")");
      return Expression::variable(index);
    }

    Op fn;
    if (name == "sin") fn = Op::Sin;
    else if (name == "cos") fn = Op::Cos;
    else if (name == "exp") fn = Op::Exp;
    else if (name == "tanh") fn = Op::Tanh;
    else throw ParseError(start, "unknown identifier '" + std::string(name) + "'");

    if (!accept('(')) throw ParseError(pos_, "expected '(' after " + std::string(name));
    Expression arg = sum();
    if (!accept(')')) throw ParseError(pos_, "expected ')'");
    return Expression::unary(fn, arg);
  }

  std::string_view text_;
  int dim_;
  std::size_t pos_ = 0;
};

}  // namespace

Expression parse_expression(std::string_view text, int dim) {
  if (dim < 1) throw std::invalid_argument("dimension must be >= 1");
  return Parser(text, dim).parse();
}

// ---------------------------------------------------------------------------
// Checked evaluation

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

double eval_checked(const Expression& e, std::span<const double> p) {
  double r = 0.0;
  switch (e.op()) {
    case Op::Constant: return e.value();
    case Op::Variable: return p[static_cast<std::size_t>(e.variable_index() - 1)];
    case Op::Negate: r = -eval_checked(e.operand(0), p); break;
    case Op::Sin: r = std::sin(eval_checked(e.operand(0), p)); break;
    case Op::Cos: r = std::cos(eval_checked(e.operand(0), p)); break;
    case Op::Exp: r = std::exp(eval_checked(e.operand(0), p)); break;
    case Op::Tanh: r = std::tanh(eval_checked(e.operand(0), p)); break;
    case Op::Pow: r = ipow(eval_checked(e.operand(0), p), e.exponent()); break;
    case Op::Add: r = eval_checked(e.operand(0), p) + eval_checked(e.operand(1), p); break;
    case Op::Sub: r = eval_checked(e.operand(0), p) - eval_checked(e.operand(1), p); break;
    case Op::Mul: r = eval_checked(e.operand(0), p) * eval_checked(e.operand(1), p); break;
    case Op::Div: {
      const double den = eval_checked(e.operand(1), p);
      if (den == 0.0) throw NonFiniteError(to_string(e), "division by zero");
      r = eval_checked(e.operand(0), p) / den;
      break;
    }
  }
  if (!std::isfinite(r)) throw NonFiniteError(to_string(e), "overflow or undefined value");
  return r;
}

}  // namespace

double evaluate(const Expression& e, std::span<const double> point) {
  if (static_cast<std::size_t>(e.max_variable()) > point.size())
    throw std::invalid_argument("evaluation point has " + std::to_string(point.size()) +
                                " coordinates, expression uses x" + std::to_string(e.max_variable()));
  for (double v : point)
    if (!std::isfinite(v)) throw std::invalid_argument("evaluation point is not finite");
  return eval_checked(e, point);
}

// ---------------------------------------------------------------------------
// Compiled tape

CompiledExpression::CompiledExpression(const Expression& e) {
  std::size_t depth = 0;
  // Iterative post-order to avoid deep recursion on long tapes.
  struct Frame {
    const Expression* e;
    std::size_t next;
  };
  std::vector<Frame> stack{{&e, 0}};
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.e->arity()) {
      const Expression* child = &f.e->operand(f.next++);
      stack.push_back({child, 0});
      continue;
    }
    const Expression& n = *f.e;
    Instr ins{n.op(), 0, 0, 0.0};
    if (n.op() == Op::Constant) ins.value = n.value();
    if (n.op() == Op::Variable) ins.variable = n.variable_index() - 1;
    if (n.op() == Op::Pow) ins.exponent = n.exponent();
    tape_.push_back(ins);
    if (n.arity() == 0) ++depth;
    if (n.arity() == 2) --depth;
    max_depth_ = std::max(max_depth_, depth);
    if (n.op() == Op::Variable) constant_ = false;
    stack.pop_back();
  }
  if (constant_) {
    constant_value_ = (*this)(std::span<const double>{});
    folded_ = true;
  }
}

double CompiledExpression::operator()(std::span<const double> point) const noexcept {
  if (folded_) return constant_value_;
  constexpr std::size_t kInline = 64;
  std::array<double, kInline> inline_stack;
  std::vector<double> heap_stack;
  double* s = inline_stack.data();
  if (max_depth_ > kInline) {
    heap_stack.resize(max_depth_);
    s = heap_stack.data();
  }
  std::size_t top = 0;
  for (const Instr& ins : tape_) {
    switch (ins.op) {
      case Op::Constant: s[top++] = ins.value; break;
      case Op::Variable: s[top++] = point[static_cast<std::size_t>(ins.variable)]; break;
      case Op::Negate: s[top - 1] = -s[top - 1]; break;
      case Op::Sin: s[top - 1] = std::sin(s[top - 1]); break;
      case Op::Cos: s[top - 1] = std::cos(s[top - 1]); break;
      case Op::Exp: s[top - 1] = std::exp(s[top - 1]); break;
      case Op::Tanh: s[top - 1] = std::tanh(s[top - 1]); break;
      case Op::Pow: s[top - 1] = ipow(s[top - 1], ins.exponent); break;
      case Op::Add: --top; s[top - 1] = s[top - 1] + s[top]; break;
      case Op::Sub: --top; s[top - 1] = s[top - 1] - s[top]; break;
      case Op::Mul: --top; s[top - 1] = s[top - 1] * s[top]; break;
      case Op::Div: --top; s[top - 1] = s[top - 1] / s[top]; break;
    }
  }
  return top == 1 ? s[0] : 0.0;
}

CompiledField::CompiledField(std::span<const Expression> exprs) {
  parts_.reserve(exprs.size());
  for (const auto& e : exprs) parts_.emplace_back(e);
}

bool CompiledField::evaluate(std::span<const double> point, std::span<double> out) const noexcept {
  bool finite = true;
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    out[i] = parts_[i](point);
    finite = finite && std::isfinite(out[i]);
  }
  return finite;
}

// ---------------------------------------------------------------------------
// Operators

Expression operator+(const Expression& a, const Expression& b) { return Expression::binary(Op::Add, a, b); }
Expression operator-(const Expression& a, const Expression& b) { return Expression::binary(Op::Sub, a, b); }
Expression operator*(const Expression& a, const Expression& b) { return Expression::binary(Op::Mul, a, b); }
Expression operator/(const Expression& a, const Expression& b) { return Expression::binary(Op::Div, a, b); }
Expression operator-(const Expression& a) { return Expression::unary(Op::Negate, a); }

}  // namespace hypolab::fieldlang
