#pragma once
#include <stdexcept>
#include <string>

namespace lab {

// Error taxonomy mirrored by the CLI exit codes (config 2, backend 3,
// capability 4, non-finite numerics 5).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BackendError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CapabilityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace lab
