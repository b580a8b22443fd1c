#pragma once

#include <stdexcept>
#include <string>

namespace duvsynth {

// Error taxonomy used across the library. Every throw site picks the most
// specific category; callers catch duvsynth::Error for anything of ours.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible tensor/array shapes.
struct DimensionError : Error {
    using Error::Error;
};

// An argument value is outside its documented range.
struct ParameterError : Error {
    using Error::Error;
};

// A documented precondition on the data content was violated.
struct ContractError : Error {
    using Error::Error;
};

// Input data (files, datasets, label sets) is unusable.
struct DataError : Error {
    using Error::Error;
};

// Operation requires state (checkpoints, trained params) that is missing.
struct StateError : Error {
    using Error::Error;
};

}  // namespace duvsynth
