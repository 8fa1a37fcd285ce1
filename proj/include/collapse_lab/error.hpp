#pragma once

#include <stdexcept>
#include <string>

namespace collapse_lab {

/// Raised when a caller hands in parameters that violate an operation's precondition.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Iterative elliptic solve did not reach its tolerance.
class SolverError : public std::runtime_error {
public:
    SolverError(const std::string& what, double residual, int iterations)
        : std::runtime_error(what + " (relative residual " + std::to_string(residual) +
                             " after " + std::to_string(iterations) + " iterations)"),
          residual_(residual),
          iterations_(iterations) {}

    double residual() const noexcept { return residual_; }
    int iterations() const noexcept { return iterations_; }

private:
    double residual_;
    int iterations_;
};

/// A cell went negative beyond the round-off allowance in reject mode.
class PositivityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Cumulative mass lost monotonicity in the radial solver.
class MonotonicityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The sup-norm series shows no finite-time growth trend.
class NoBlowupTrend : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Corrupt, truncated or version-mismatched checkpoint.
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace collapse_lab
