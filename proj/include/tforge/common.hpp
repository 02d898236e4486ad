#pragma once

#include <stdexcept>
#include <string>

namespace tforge {

// Bad arguments / bad config. CLI maps this to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Missing or corrupt input files.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numerical failure during a run (NaN loss, empty eval set, ...).
// CLI maps this to exit code 3.
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace tforge
