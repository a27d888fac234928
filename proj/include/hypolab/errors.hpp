#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hypolab {

/// Malformed field text. `position` is a 0-based byte offset into the input.
class ParseError : public std::runtime_error {
public:
  ParseError(std::size_t position, const std::string& message)
      : std::runtime_error("parse error at " + std::to_string(position) + ": " + message),
        position_(position) {}

  std::size_t position() const noexcept { return position_; }

private:
  std::size_t position_;
};

/// An evaluation produced inf/nan (division by zero, overflow, ...).
class NonFiniteError : public std::runtime_error {
public:
  NonFiniteError(const std::string& subexpression, const std::string& detail)
      : std::runtime_error("non-finite result in '" + subexpression + "': " + detail),
        subexpression_(subexpression) {}

  const std::string& subexpression() const noexcept { return subexpression_; }

private:
  std::string subexpression_;
};

/// Iterative solver gave up (Newton, eigen-solver).
class ConvergenceError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// An internal invariant was broken (PSD violated, size cap exceeded, ...).
class InvariantError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A simulated path produced a non-finite state or flow entry.
class DivergenceError : public std::runtime_error {
public:
  DivergenceError(const std::string& scheme, std::size_t step, double norm, const std::string& what)
      : std::runtime_error(what + " diverged (scheme " + scheme + ", step " + std::to_string(step) +
                           ", |X| = " + std::to_string(norm) + ")"),
        scheme_(scheme), step_(step), norm_(norm) {}

  const std::string& scheme() const noexcept { return scheme_; }
  std::size_t step() const noexcept { return step_; }
  double norm() const noexcept { return norm_; }

private:
  std::string scheme_;
  std::size_t step_;
  double norm_;
};

/// Invalid user input detected before any computation.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

}  // namespace hypolab
