#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dstn {

/// A caller broke a documented precondition (shape mismatch, index out of
/// range, probability outside its domain).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed input text. Carries the 1-based line number when known.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class EncodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A metric is undefined for the given input (single-class AUC, NlzImp with
/// no auxiliary ads).
class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline void require(bool ok, const char* what) {
  if (!ok) throw ContractViolation(what);
}

}  // namespace dstn
