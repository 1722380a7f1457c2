#pragma once

#include <stdexcept>
#include <string>

namespace pnpslab {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration (CLI exit code 2).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Non-finite values during a numeric computation (CLI exit code 3).
class NumericError : public Error {
public:
  using Error::Error;
};

/// A documented precondition of an operation does not hold.
class PreconditionError : public Error {
public:
  using Error::Error;
};

class ArgumentError : public Error {
public:
  using Error::Error;
};

/// A requested construction cannot be realized with the available data.
class InfeasibleError : public Error {
public:
  InfeasibleError(const std::string& what, double achievable)
      : Error(what), achievable_(achievable) {}

  /// Largest value of the offending knob that would have been feasible.
  double achievable() const noexcept { return achievable_; }

private:
  double achievable_;
};

/// A (feature value, label) group required for balancing is empty.
class BalanceError : public Error {
public:
  using Error::Error;
};

class ParseError : public Error {
public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

/// The conditioning event of a PN/PS estimate has probability zero.
class UndefinedEstimateError : public Error {
public:
  using Error::Error;
};

class ScheduleError : public Error {
public:
  using Error::Error;
};

/// A probe was asked to fit fewer than two label classes.
class DegenerateProbeError : public Error {
public:
  using Error::Error;
};

} // namespace pnpslab
