// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace gf4d {

/// Malformed or truncated file container (bad magic, version, counts).
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A metric or reduction was requested over an empty domain.
class UndefinedResult : public std::runtime_error {
public:
    explicit UndefinedResult(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite value reached the optimizer; training cannot continue.
class NumericalAbort : public std::runtime_error {
public:
    explicit NumericalAbort(const std::string& msg) : std::runtime_error(msg) {}
};

/// Required workspace slots are absent.
class MissingInput : public std::runtime_error {
public:
    explicit MissingInput(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace gf4d
