#include "fracimp/error.hpp"

namespace fracimp {

std::string_view to_string(ErrorCode code) noexcept
{
    switch (code) {
    case ErrorCode::parse: return "parse";
    case ErrorCode::validation: return "validation";
    case ErrorCode::contract: return "contract";
    case ErrorCode::io: return "io";
    case ErrorCode::config: return "config";
    case ErrorCode::no_solution: return "no_solution";
    case ErrorCode::singular: return "singular";
    case ErrorCode::non_convergence: return "non_convergence";
    case ErrorCode::separation: return "separation";
    case ErrorCode::underflow: return "underflow";
    case ErrorCode::identifiability: return "identifiability";
    case ErrorCode::infeasible: return "infeasible";
    }
    return "unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(message)
    , code_(code)
{
}

void fail(ErrorCode code, const std::string& message)
{
    throw Error(code, message);
}

} // namespace fracimp
