#pragma once

// Derivatives of solutions and of the inverse conjugacy:
//     D₃φ(s,t,η)  from the variational equation x_{r+1} = (A(r) + D₂F(r,φ(r))) x_r,
//     D₂G(t,η) = I − Σ_{s=τ₀}^{t−1} Φ(t,s+1) D₂F(s,φ(s,t,η)) D₃φ(s,t,η),
// and finite-difference consistency checks up to order m.

#include "conjlab/conjugacy.hpp"

#include <string>
#include <vector>

namespace conjlab {

/// Jacobian of η ↦ φ(t, s, η) for t ≥ s, i.e. the forward solution started at (s, η).
[[nodiscard]] Mat variational_jacobian(const SemilinearSystem& sys, Time s, Time t, const Omega& w, const Vec& eta);

/// K(α + K M₁)^{t−s}
[[nodiscard]] double variational_bound(const GrowthCertificate& growth, double M1, Time s, Time t);

/// A derivative bound that failed numerically; carries the computed matrix.
class BoundViolated : public Error {
public:
    BoundViolated(const std::string& what, double measured, double bound, Mat jacobian);
    double measured;
    double bound;
    Mat jacobian;
};

struct JacobianOptions {
    /// Throw BoundViolated when ‖D₂G − I‖ exceeds KM₁/(1−α).
    bool enforce_bound = true;
};

struct ConjugacyJacobian {
    Mat jacobian;
    /// ‖D₂G − I‖_{t,t,ω}
    double deviation = 0.0;
    /// KM₁/(1−α)
    double bound = 0.0;
    /// 1 − deviation; positive means D₂G is invertible by a Neumann series.
    double neumann_margin = 0.0;
};

/// D₂G(t,η) along the backward orbit φ(s,t,η), s = τ₀..t.
/// Throws ContractionViolated if M₁K ≥ 1−α.
[[nodiscard]] ConjugacyJacobian conjugacy_jacobian(const ConjugacySolution& sol, Time t, const Vec& eta,
                                                   const JacobianOptions& options = {});

/// Multilinear array of order j stored as data[out + d·(i₁ + d·(i₂ + …))].
struct Tensor {
    int dim = 0;
    int order = 0;
    std::vector<double> data;

    /// T[v, …, v]
    [[nodiscard]] Vec contract(const Vec& v) const;
};

/// D₂ʲG(t,η) for j = 1..m. Order 1 is analytic; order j ≥ 2 is the central
/// difference of order j−1. fd_agreement[j−1] is the relative error of
/// T_j[v,…,v] against a j-th central difference of G along a random unit v.
struct JacobianStack {
    std::vector<Tensor> derivatives;
    std::vector<double> fd_agreement;
};

[[nodiscard]] JacobianStack jacobian_stack(const ConjugacySolution& sol, Time t, const Vec& eta, int m,
                                           std::uint64_t seed = 1);

/// j-th central difference of f along v with step h, O(h²) accurate.
[[nodiscard]] Vec central_difference(const std::function<Vec(const Vec&)>& f, const Vec& x, const Vec& v, int order,
                                     double h);

struct SmoothOptions {
    SamplingSpec sampling{7, 100, 100, 10.0};
    /// Relative error allowed between analytic and FD first derivatives.
    double fd_tolerance = 1e-5;
    bool keep_samples = true;
};

struct OrderReport {
    int order = 1;
    std::size_t samples = 0;
    /// Order 1: max relative error of D₂G v against the central difference of G.
    double max_fd_error = 0.0;
    /// Median of (D_h − D_{h/2})/(D_{h/2} − D_{h/4}); 4 for a smooth O(h²) scheme.
    double median_richardson = 0.0;
    std::size_t richardson_failures = 0;
    std::size_t fd_failures = 0;
    /// max ‖DʲG(η) − DʲG(η′)‖/‖η − η′‖ at nearby sampled points.
    double continuity_modulus = 0.0;
    bool consistent = true;
};

struct SmoothSample {
    Time t = 0;
    double point_norm = 0.0;
    double fd_error = 0.0;
    double deviation = 0.0;
};

struct SmoothnessReport {
    std::vector<OrderReport> orders;
    ConditionCheck smooth_condition;
    double deviation_bound = 0.0;
    double max_deviation = 0.0;
    std::size_t deviation_violations = 0;
    /// 1 − max deviation
    double invertibility_margin = 0.0;
    /// max ‖D₃φ(s,t,η)‖ / K(α+KM₁)^{t−s}
    double variational_worst_ratio = 0.0;
    std::size_t variational_violations = 0;
    double variational_max_fd_error = 0.0;
    /// max ‖D₂G(t,H(t,ξ)) · DH_fd(t,ξ) − I‖
    double chain_rule_residual = 0.0;
    /// Largest FD slope of H(t,·) seen; reported without a bound.
    double h_fd_slope = 0.0;
    std::vector<std::string> failures;
    std::string verdict;
    std::vector<SmoothSample> samples;

    [[nodiscard]] bool consistent() const { return failures.empty(); }
};

[[nodiscard]] SmoothnessReport smoothness_report(const ConjugacySolution& sol, int m,
                                                 const SmoothOptions& options = {});

}  // namespace conjlab
