#pragma once

// Shared vocabulary for the conjlab library: dense linear algebra aliases,
// the sampled random parameter, the finite time window and the error types
// every module throws.

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace conjlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

using Time = std::int64_t;

/// A sampled point of the base space. `path` names a realization of the
/// driving noise, `shift` is the accumulated shift θ^shift applied to it.
/// Deterministic systems ignore both fields.
struct Omega {
    std::uint64_t path = 0;
    Time shift = 0;

    [[nodiscard]] Omega shifted(Time n) const { return {path, shift + n}; }

    friend bool operator==(const Omega&, const Omega&) = default;
    friend auto operator<=>(const Omega&, const Omega&) = default;
};

/// Finite discrete time interval [t_min, t_max] with the base point tau0 of
/// every series. Suprema over the paper's unbounded interval become maxima
/// over this window.
class TimeWindow {
public:
    TimeWindow(Time t_min, Time t_max);
    TimeWindow(Time t_min, Time t_max, Time tau0);

    [[nodiscard]] Time t_min() const { return t_min_; }
    [[nodiscard]] Time t_max() const { return t_max_; }
    [[nodiscard]] Time tau0() const { return tau0_; }
    [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(t_max_ - t_min_ + 1); }
    [[nodiscard]] bool contains(Time t) const { return t >= t_min_ && t <= t_max_; }
    [[nodiscard]] std::size_t index(Time t) const { return static_cast<std::size_t>(t - t_min_); }

    void require(Time t, const char* what) const;

private:
    Time t_min_;
    Time t_max_;
    Time tau0_;
};

/// Iterative solver settings shared by every contraction loop.
struct SolverOptions {
    double tolerance = 1e-10;
    std::size_t max_iterations = 100000;
};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input: dimensions, windows, non-SPD weights, malformed config.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A linear step A(t) that cannot be inverted.
class SingularStep : public Error {
public:
    SingularStep(Time step, double rcond);
    Time step;
    double rcond;
};

/// A contraction requirement that does not hold; `measured` is the factor
/// that should have been below one.
class ContractionViolated : public Error {
public:
    ContractionViolated(const std::string& what, double measured);
    double measured;
};

/// An iteration that exhausted its budget.
class NotConverged : public Error {
public:
    NotConverged(const std::string& what, std::size_t iterations, double factor, double residual);
    std::size_t iterations;
    double factor;
    double residual;
};

/// The sampled data admit no certificate of the requested kind.
class CertificateError : public Error {
public:
    using Error::Error;
};

/// A numerically evaluated quantity that is non-finite.
class NumericalFailure : public Error {
public:
    using Error::Error;
};

}  // namespace conjlab
