/**
 * @file errors.hpp
 * @brief Exception types shared by the library.
 */
#pragma once

#include <stdexcept>
#include <string>

namespace icecr {

/// A caller broke a documented precondition (wrong shape, out-of-range argument).
class ContractViolation : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Geometry without a usable orientation (zero denominators, collapsed cells).
class DegenerateGeometry : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Data that cannot be summarized (e.g. a zero-variance invariant column).
class DegenerateData : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed or missing on-disk artifact.
class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractViolation(what);
}

}  // namespace icecr
