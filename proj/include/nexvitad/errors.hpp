#pragma once

#include <stdexcept>
#include <string>

namespace nexvitad {

// Error categories map onto distinct CLI exit codes.
enum class ErrorKind {
    Config,    // bad run configuration / parameters
    Shape,     // tensor dimension mismatch
    Data,      // missing or malformed files, bad dataset state
    Numeric,   // NaN/Inf leaks, divergence, undefined metrics
    Contract,  // API misuse (e.g. optimizer step on a frozen param)
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void throw_config(const std::string& msg) { throw Error(ErrorKind::Config, msg); }
[[noreturn]] inline void throw_shape(const std::string& msg) { throw Error(ErrorKind::Shape, msg); }
[[noreturn]] inline void throw_data(const std::string& msg) { throw Error(ErrorKind::Data, msg); }
[[noreturn]] inline void throw_numeric(const std::string& msg) { throw Error(ErrorKind::Numeric, msg); }
[[noreturn]] inline void throw_contract(const std::string& msg) { throw Error(ErrorKind::Contract, msg); }

} // namespace nexvitad
