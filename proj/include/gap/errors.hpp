#pragma once

#include <stdexcept>
#include <string>

namespace gap {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated API precondition (e.g. backward() on a non-scalar).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Malformed GAPF container or manifest.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Well-formed input whose content breaks a domain rule.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace gap
