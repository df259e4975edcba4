#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace protopart {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Error taxonomy. The CLI maps each category onto a process exit code:
// validation-type errors -> 2, runtime/numerical -> 3, I/O -> 4.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 3; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class ValidationError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class DimensionError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class DomainError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class StratificationError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class ProjectionError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

// Prototype p_{m,k} lives at flat index m + k*M.
struct PrototypeIndex {
    int m = 0;
    int k = 0;
    constexpr int flat(int per_class) const noexcept { return m + k * per_class; }
    static constexpr PrototypeIndex from_flat(int p, int per_class) noexcept {
        return {p % per_class, p / per_class};
    }
    friend bool operator==(const PrototypeIndex&, const PrototypeIndex&) = default;
};

}  // namespace protopart
