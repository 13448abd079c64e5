#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pargan {

/// Base of every error thrown by the library. `kind()` is a stable,
/// machine-parsable class name used by the CLI's single-line error report.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("dimension_error", what) {}
};

class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& what) : Error("parameter_error", what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract_error", what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data_error", what) {}
};

class DegenerateDomainError : public Error {
 public:
  explicit DegenerateDomainError(const std::string& what)
      : Error("degenerate_domain_error", what) {}
};

class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& what) : Error("non_finite_error", what) {}
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error("format_error", what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("parse_error", what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class UndefinedApError : public Error {
 public:
  explicit UndefinedApError(const std::string& what) : Error("undefined_ap_error", what) {}
};

}  // namespace pargan
