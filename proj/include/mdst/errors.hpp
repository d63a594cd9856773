#pragma once

#include <stdexcept>
#include <string>

namespace mdst {

// Shape or width disagreement between operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite values or arguments outside a function's domain.
struct NumericError : std::domain_error {
    using std::domain_error::domain_error;
};

// Caller violated a documented precondition.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// Missing, malformed or inconsistent dataset content.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mdst
