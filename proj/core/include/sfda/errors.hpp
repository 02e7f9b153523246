#pragma once

#include <stdexcept>
#include <string>

namespace sfda {

/// Tensor shapes do not fit the requested operation.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value left the mathematical domain of an op (log of a nonpositive
/// number and friends).
class MathDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A call-site contract was broken: non-scalar loss, label out of range,
/// missing gradient, empty eval set, ...
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid user-facing configuration (unknown keys, bad values, bad CLI
/// flags). Maps to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Corrupt or mismatched on-disk artifacts (datasets, checkpoints,
/// manifests). Maps to exit code 2.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sfda
