#pragma once

#include <stdexcept>
#include <string>

namespace dcac {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when training hits a non-finite loss; carries the diagnostic dump path.
struct TrainAbort : std::runtime_error {
    std::string dump_path;
    TrainAbort(const std::string& msg, std::string dump) : std::runtime_error(msg), dump_path(std::move(dump)) {}
};

}  // namespace dcac
