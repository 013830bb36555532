#pragma once

#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace headsup {

// Error hierarchy shared by all modules. CLI maps UsageError to exit code 1
// and everything else below to exit code 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};
struct RangeError : Error {
    using Error::Error;
};
struct DegenerateLandmarks : Error {
    using Error::Error;
};
struct ContractViolation : Error {
    using Error::Error;
};
struct NonFiniteLoss : Error {
    using Error::Error;
};
struct EmptyInput : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct UsageError : Error {
    using Error::Error;
};

// HEADSUP_DETERMINISTIC=1 forces single-worker deterministic mode everywhere.
inline bool deterministic_mode() {
    const char* v = std::getenv("HEADSUP_DETERMINISTIC");
    return v != nullptr && std::string(v) == "1";
}

inline int env_thread_count() {
    if (deterministic_mode()) return 1;
    const char* v = std::getenv("HEADSUP_THREADS");
    if (v != nullptr) {
        int n = std::atoi(v);
        if (n >= 1) return n;
    }
    return 0;  // 0 = library default (hardware concurrency)
}

}  // namespace headsup
