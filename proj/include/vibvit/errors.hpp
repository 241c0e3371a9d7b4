// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace vibvit {

/// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Invalid model, training or run configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// API misuse: wrong mode, missing inputs, empty collections.
class UsageError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Non-finite values or out-of-domain numeric arguments.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed dataset or checkpoint bytes.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Normalized mutual information requested for a channel carrying no information.
class UndefinedNmiError : public NumericError {
public:
    using NumericError::NumericError;
};

}  // namespace vibvit
