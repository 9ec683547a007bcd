#ifndef COATBENCH_ERRORS_HPP
#define COATBENCH_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace coatbench {

// One exception type per contract failure class named in the module specs.

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error("config error: " + m) {}
};

struct ArgumentError : std::runtime_error {
    explicit ArgumentError(const std::string& m) : std::runtime_error("argument error: " + m) {}
};

struct IngestError : std::runtime_error {
    explicit IngestError(const std::string& m) : std::runtime_error("ingestion error: " + m) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error("i/o error: " + m) {}
};

struct IncompatibilityError : std::runtime_error {
    explicit IncompatibilityError(const std::string& m)
        : std::runtime_error("incompatible format: " + m) {}
};

struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& m) : std::runtime_error("training error: " + m) {}
};

struct CalibrationError : std::runtime_error {
    explicit CalibrationError(const std::string& m) : std::runtime_error("calibration error: " + m) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& m) : std::runtime_error("contract violation: " + m) {}
};

}  // namespace coatbench

#endif
