#ifndef RFION_ERROR_HPP
#define RFION_ERROR_HPP

#include <stdexcept>
#include <string>

namespace rfion {

/// Invalid numeric argument (non-positive frequency, negative rate, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Inconsistent configuration, e.g. a filter cutoff at or above Nyquist.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An estimator's precondition on its input data is not met.
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require_positive(double v, const char* what) {
  if (!(v > 0.0)) throw DomainError(std::string(what) + " must be positive");
}

inline void require_non_negative(double v, const char* what) {
  if (!(v >= 0.0)) throw DomainError(std::string(what) + " must be non-negative");
}

}  // namespace detail
}  // namespace rfion

#endif  // RFION_ERROR_HPP
