#pragma once

#include <stdexcept>
#include <string>

namespace top {

// Tensor/operation shapes disagree.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Violated API precondition (empty dataset, non-scalar loss, one-class labels, ...).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Malformed input file (IDX, JSON, CSV).
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Every restart of an attack was discarded.
struct AttackError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Feature vector does not match the detector's schema.
struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace top
