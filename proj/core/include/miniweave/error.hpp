#ifndef MINIWEAVE_ERROR_HPP
#define MINIWEAVE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace miniweave {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape rules violated (matmul inner extents, conv channel counts, ...).
struct DimensionError : Error {
    using Error::Error;
};

// Caller broke an API contract (non-scalar loss, non-monotone step grid).
struct ContractError : Error {
    using Error::Error;
};

// Bad configuration: unknown keys, invalid ranges, selector matched nothing.
struct ConfigError : Error {
    using Error::Error;
};

// Attention-control failures: override shape mismatch, missing cached state.
struct ControlError : Error {
    using Error::Error;
};

// Token not present in the vocabulary.
struct VocabularyError : Error {
    using Error::Error;
};

// Dataset-level problems: missing masks, empty crops, absent files.
struct DataError : Error {
    using Error::Error;
};

// Non-finite values where the tensor invariant promises finiteness.
struct NumericError : Error {
    using Error::Error;
};

// File format problems: bad magic, truncated payload, unwritable path.
struct IoError : Error {
    using Error::Error;
};

}  // namespace miniweave

#endif
