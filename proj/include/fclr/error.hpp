#pragma once

#include <stdexcept>
#include <string>

namespace fclr {

enum class ErrorKind {
    invalid_basis,
    invalid_domain,
    out_of_domain,
    degenerate_row,
    invalid_composition,
    degenerate_block,
    insufficient_grid,
    invalid_grid,
    singular_controls,
    invalid_config,
    invalid_folds,
    undefined_share,
    insufficient_block,
    invalid_correlation,
    degenerate_signal,
    undefined_rate,
    dimension_mismatch,
    input,
};

inline const char* to_string(ErrorKind kind) noexcept
{
    switch (kind) {
    case ErrorKind::invalid_basis: return "invalid-basis";
    case ErrorKind::invalid_domain: return "invalid-domain";
    case ErrorKind::out_of_domain: return "out-of-domain";
    case ErrorKind::degenerate_row: return "degenerate-row";
    case ErrorKind::invalid_composition: return "invalid-composition";
    case ErrorKind::degenerate_block: return "degenerate-block";
    case ErrorKind::insufficient_grid: return "insufficient-grid";
    case ErrorKind::invalid_grid: return "invalid-grid";
    case ErrorKind::singular_controls: return "singular-controls";
    case ErrorKind::invalid_config: return "invalid-config";
    case ErrorKind::invalid_folds: return "invalid-folds";
    case ErrorKind::undefined_share: return "undefined-share";
    case ErrorKind::insufficient_block: return "insufficient-block";
    case ErrorKind::invalid_correlation: return "invalid-correlation";
    case ErrorKind::degenerate_signal: return "degenerate-signal";
    case ErrorKind::undefined_rate: return "undefined-rate";
    case ErrorKind::dimension_mismatch: return "dimension-mismatch";
    case ErrorKind::input: return "input";
    }
    return "unknown";
}

/// Exception carrying a machine-checkable kind alongside the message.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind)
    {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

} // namespace fclr
