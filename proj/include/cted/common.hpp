#pragma once

#include <stdexcept>
#include <string>

namespace cted {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated call contract (controller output shapes, incomplete cache, ...).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
    int step;
    DivergenceError(const std::string& msg, int step_index)
        : std::runtime_error(msg + " (step " + std::to_string(step_index) + ")"), step(step_index) {}
};

}  // namespace cted
