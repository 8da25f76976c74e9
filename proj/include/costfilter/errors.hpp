#pragma once

#include <stdexcept>
#include <string>

namespace costfilter {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

struct MetricError : std::runtime_error {
    explicit MetricError(const std::string& m) : std::runtime_error(m) {}
};

}  // namespace costfilter
