#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mededge {

/// Incompatible tensor or layer shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf where finite values are required.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Malformed network graph, mode violation or stale activation trace.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Bad user-supplied data (unknown symptom, empty dataset, bad flag value).
class InputError : public std::invalid_argument {
 public:
  InputError(const std::string& message, std::vector<std::string> offenders = {})
      : std::invalid_argument(message), offenders_(std::move(offenders)) {}
  const std::vector<std::string>& offenders() const noexcept { return offenders_; }

 private:
  std::vector<std::string> offenders_;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One structural or checksum problem found in a bundle or record file.
struct Violation {
  std::uint64_t offset = 0;
  std::string tensor;  // empty for structural violations
  std::string message;
};

std::string describe(const std::vector<Violation>& violations);

class IntegrityError : public std::runtime_error {
 public:
  explicit IntegrityError(std::vector<Violation> violations)
      : std::runtime_error(describe(violations)), violations_(std::move(violations)) {}
  const std::vector<Violation>& violations() const noexcept { return violations_; }

 private:
  std::vector<Violation> violations_;
};

}  // namespace mededge
