#ifndef DECOG_ERRORS_HPP
#define DECOG_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace decog {

// Error taxonomy; each family maps to a distinct process exit code in the CLI.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration, bad template specs, capacity overruns.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed or corrupted files (bad magic, truncation, CRC mismatch).
struct FormatError : Error {
    using Error::Error;
};

// Remote LM transport failures: timeouts, protocol violations, handshakes.
struct TransportError : Error {
    using Error::Error;
};

// Broken internal invariants; seeing one of these is a bug.
struct InternalError : Error {
    using Error::Error;
};

// Out-of-range token or state id passed to an operation.
struct RangeError : Error {
    using Error::Error;
};

// Subset construction exceeded the configured state budget.
struct CapacityError : ConfigError {
    using ConfigError::ConfigError;
};

// Compliance query issued with no budget left.
struct BudgetExhaustedError : InternalError {
    using InternalError::InternalError;
};

}  // namespace decog

#endif
