#pragma once

// State space, weighted norm families, semilinear systems
//     x_{t+1} = A_ω(t) x_t + F_ω(t, x_t)
// and their evolution operators and general solutions on a finite window.

#include "conjlab/types.hpp"

#include <functional>
#include <optional>
#include <span>

namespace conjlab {

/// Time- and parameter-dependent inner-product norms ‖x‖_{t,ω} = sqrt(xᵀ W(t,ω) x).
class NormFamily {
public:
    using WeightFn = std::function<Mat(Time, const Omega&)>;

    /// Plain Euclidean norm on R^dim at every (t, ω).
    static NormFamily euclidean(int dim);
    /// One fixed SPD weight for all (t, ω).
    static NormFamily constant(Mat weight);
    /// Arbitrary weight field; it is validated lazily on every evaluation.
    static NormFamily from_weights(int dim, WeightFn weight);

    [[nodiscard]] int dim() const { return dim_; }
    [[nodiscard]] bool is_euclidean() const { return euclidean_; }

    [[nodiscard]] Mat weight(Time t, const Omega& w) const;
    /// Upper-triangular R with W = RᵀR, so that ‖x‖_{t,ω} = ‖R x‖₂.
    [[nodiscard]] Mat factor(Time t, const Omega& w) const;
    [[nodiscard]] double norm(const Vec& x, Time t, const Omega& w) const;
    /// Smallest ℓ with ‖x‖/ℓ ≤ ‖x‖_{t,ω} ≤ ℓ‖x‖.
    [[nodiscard]] double ell(Time t, const Omega& w) const;

private:
    NormFamily(int dim, bool euclidean, WeightFn weight);

    int dim_;
    bool euclidean_;
    WeightFn weight_;
};

/// Invertible linear part A_ω(t).
struct LinearPart {
    std::function<Mat(Time, const Omega&)> matrix;
};

/// Nonlinear part F_ω(t, x) with optional analytic derivatives.
struct Nonlinearity {
    using ValueFn = std::function<Vec(Time, const Omega&, const Vec&)>;
    using JacobianFn = std::function<Mat(Time, const Omega&, const Vec&)>;
    /// j-th derivative D₂ʲF(t,x)[v₁,…,v_j] for j = dirs.size() ≥ 1.
    using DerivativeFn = std::function<Vec(Time, const Omega&, const Vec&, std::span<const Vec>)>;

    ValueFn value;
    JacobianFn jacobian;
    DerivativeFn derivative;
    int smoothness = 0;
    bool zero_fixed_point = true;

    static Nonlinearity zero(int dim);
};

struct SemilinearSystem {
    int dim = 1;
    LinearPart linear;
    Nonlinearity nonlinear;
    NormFamily norms = NormFamily::euclidean(1);
    TimeWindow window{0, 0};

    /// Throws InvalidArgument if the parts disagree on dimension or F(t,0) ≠ 0
    /// at the window start while the zero-fixed-point flag is set. Evaluated at ω.
    void validate(const Omega& w = {}) const;
};

/// Options for solving A x + F(t,x) = y.
struct InvertOptions {
    SolverOptions solver;
    /// Certified Lipschitz constant of F(t,·); when absent the contraction is
    /// monitored from the iterates instead.
    std::optional<double> lipschitz;
};

[[nodiscard]] Mat step_matrix(const SemilinearSystem& sys, Time t, const Omega& w);
/// A(t)⁻¹, throwing SingularStep when A(t) is numerically singular.
[[nodiscard]] Mat inverse_step_matrix(const SemilinearSystem& sys, Time t, const Omega& w);
/// One forward step x ↦ A(t)x + F(t,x).
[[nodiscard]] Vec step(const SemilinearSystem& sys, Time t, const Omega& w, const Vec& x);
[[nodiscard]] Vec nonlinear_term(const SemilinearSystem& sys, Time t, const Omega& w, const Vec& x);

/// Φ_ω(t,s): identity for t = s, A(t−1)⋯A(s) for s < t, A(t)⁻¹⋯A(s−1)⁻¹ for s > t.
[[nodiscard]] Mat evolution_operator(const SemilinearSystem& sys, Time t, Time s, const Omega& w);

/// Solution of A(t)x + F(t,x) = y by the Banach iteration x ↦ A⁻¹y − A⁻¹F(t,x).
[[nodiscard]] Vec invert_step(const SemilinearSystem& sys, Time t, const Omega& w, const Vec& y,
                              const InvertOptions& options = {});

/// φ(t, τ, ω, ξ): forward recursion for t ≥ τ, invert_step chain for t < τ.
[[nodiscard]] Vec general_solution(const SemilinearSystem& sys, Time t, Time tau, const Omega& w, const Vec& xi,
                                   const InvertOptions& options = {});

/// ‖M‖_{s,t,ω} = sup_{‖x‖_{s,ω}=1} ‖Mx‖_{t,ω}, computed exactly as a
/// generalized singular value.
[[nodiscard]] double operator_norm(const Mat& m, Time s, Time t, const Omega& w, const NormFamily& norms);

using Forcing = std::function<Vec(Time, const Omega&)>;

/// Φ(t,τ)ξ + Σ_{i=τ}^{t−1} Φ(t,i+1) f(i,ω) for t ≥ τ.
[[nodiscard]] Vec variation_of_constants(const SemilinearSystem& sys, Time t, Time tau, const Omega& w,
                                         const Vec& xi, const Forcing& forcing);

/// D₂F(t,x): the analytic Jacobian when available, central differences otherwise.
[[nodiscard]] Mat nonlinearity_jacobian(const SemilinearSystem& sys, Time t, const Omega& w, const Vec& x,
                                        double fd_step = 1e-5);

/// D₂ʲF(t,x)[v₁,…,v_j]: analytic when available, nested central differences
/// with a step scaled by max(1, ‖x‖) otherwise.
[[nodiscard]] Vec nonlinearity_derivative(const SemilinearSystem& sys, Time t, const Omega& w, const Vec& x,
                                          std::span<const Vec> dirs, double fd_step);

/// Default finite-difference step for derivatives of order j (1e-5, 1e-4, 1e-3, …).
[[nodiscard]] double default_fd_step(int order);

}  // namespace conjlab
