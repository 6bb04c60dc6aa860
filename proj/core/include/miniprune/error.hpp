#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace miniprune {

// Every failure raised by the library derives from Error. The category
// drives the CLI exit code: numerical failures map to 3, everything else
// to 2.
enum class ErrorKind {
    kDimension,
    kIndex,
    kInput,
    kConfiguration,
    kConsistency,
    kCalibration,
    kLoad,
    kNumerical,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }
    bool numerical() const noexcept { return kind_ == ErrorKind::kNumerical; }

private:
    ErrorKind kind_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& w) : Error(ErrorKind::kDimension, w) {}
};
struct IndexError : Error {
    explicit IndexError(const std::string& w) : Error(ErrorKind::kIndex, w) {}
};
struct InputError : Error {
    explicit InputError(const std::string& w) : Error(ErrorKind::kInput, w) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error(ErrorKind::kConfiguration, w) {}
};
struct ConsistencyError : Error {
    explicit ConsistencyError(const std::string& w) : Error(ErrorKind::kConsistency, w) {}
};
struct CalibrationError : Error {
    explicit CalibrationError(const std::string& w) : Error(ErrorKind::kCalibration, w) {}
};
struct LoadError : Error {
    explicit LoadError(const std::string& w) : Error(ErrorKind::kLoad, w) {}
};
struct NumericalError : Error {
    explicit NumericalError(const std::string& w) : Error(ErrorKind::kNumerical, w) {}
};

// Divergence during an optimization loop, tagged with the failing step.
class TrainingError : public Error {
public:
    TrainingError(const std::string& w, std::int64_t step)
        : Error(ErrorKind::kNumerical, w + " at step " + std::to_string(step)), step_(step) {}
    std::int64_t step() const noexcept { return step_; }

private:
    std::int64_t step_;
};

}  // namespace miniprune
