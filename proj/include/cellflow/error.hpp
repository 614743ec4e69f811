#pragma once

#include <stdexcept>
#include <string>

namespace cellflow {

/// Base of every exception thrown by the engine.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Error carrying a module-specific code enum; `Code` must be an enum.
template <typename Code>
class CodedError : public Error {
public:
    CodedError(Code code, const std::string& what) : Error(what), code_(code) {}
    Code code() const noexcept { return code_; }

private:
    Code code_;
};

}  // namespace cellflow
