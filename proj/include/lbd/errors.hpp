#pragma once

#include <stdexcept>
#include <string>

namespace lbd {

// Error families map to distinct CLI exit codes (see tools/).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor/layer shape violations and invalid arguments.
struct ShapeError : Error {
    using Error::Error;
};

// File i/o failures: missing files, short reads, write errors.
struct IoError : Error {
    using Error::Error;
};

// Malformed containers: bad-magic, version-mismatch, checksum-mismatch.
struct FormatError : Error {
    using Error::Error;
};

// Dataset construction problems (count mismatches, insufficient samples).
struct DataError : Error {
    using Error::Error;
};

// Training/optimization failed to make progress.
struct ConvergenceError : Error {
    using Error::Error;
};

// Experiment config parse/validation failures.
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace lbd
