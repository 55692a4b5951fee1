#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fracimp {

// Machine-readable failure categories. The CLI maps these onto exit codes.
enum class ErrorCode {
    parse,
    validation,
    contract,
    io,
    config,
    no_solution,
    singular,
    non_convergence,
    separation,
    underflow,
    identifiability,
    infeasible,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message);

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

inline void require(bool condition, const std::string& message)
{
    if (!condition) {
        fail(ErrorCode::contract, message);
    }
}

} // namespace fracimp
