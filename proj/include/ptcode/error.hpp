#pragma once

#include <stdexcept>
#include <string>

namespace ptcode {

// Malformed input files, inconsistent datasets, bad configuration values.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite losses or gradients, failed gradient certification.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ptcode
