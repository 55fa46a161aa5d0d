#pragma once

// Sampled certification of the constants behind the linearization theorems:
// bounded growth (K, α) of the linear part, the bounds M, L, M_j of the
// nonlinearity, the smallness conditions that combine them, and the discrete
// Gronwall estimate.

#include "conjlab/sampling.hpp"
#include "conjlab/system_core.hpp"

#include <span>
#include <string>
#include <vector>

namespace conjlab {

/// ‖Φ_ω(t,s)‖_{s,t,ω} ≤ K α^{t−s} for all s ≤ t in [t_min, t_max].
struct GrowthCertificate {
    double K = 1.0;
    double alpha = 0.5;
    /// max over sampled pairs of ‖Φ(t,s)‖ − K α^{t−s}; non-positive when valid.
    double residual = 0.0;
    Time t_min = 0;
    Time t_max = 0;
    /// decay[n] = max_s ‖Φ(s+n, s)‖_{s,s+n,ω}, the data the fit used.
    std::vector<double> decay;
};

/// Fits α by log-linear regression of the decay profile, then takes the
/// smallest K making the bound hold on every pair of the window.
/// Throws CertificateError if the fitted rate is not below one.
[[nodiscard]] GrowthCertificate certify_bounded_growth(const SemilinearSystem& sys, const Omega& w);

/// Sup bound M, Lipschitz bound L and derivative bounds M_0..M_m on a sampled domain.
struct NonlinearityBounds {
    double M = 0.0;
    double L = 0.0;
    std::vector<double> Mj;
    SamplingSpec sampling;
    double safety_factor = 1.05;

    [[nodiscard]] double derivative_bound(std::size_t order) const;
};

struct BoundsOptions {
    SamplingSpec sampling;
    /// Highest derivative order m; M_1 is always estimated.
    int order = 1;
    double safety_factor = 1.05;
    /// Number of best samples polished by a local pattern search.
    std::size_t refine_top = 5;
};

[[nodiscard]] NonlinearityBounds estimate_nonlinearity_bounds(const SemilinearSystem& sys, const Omega& w,
                                                              const BoundsOptions& options = {});

/// One pass/fail verdict with the value it was decided on.
struct ConditionCheck {
    std::string name;
    bool pass = false;
    double measured = 0.0;
    double threshold = 0.0;
    /// threshold − measured
    double margin = 0.0;
};

struct ConditionReport {
    ConditionCheck topological;    // K L < 1 − α
    ConditionCheck smooth;         // M_1 K < 1 − α
    ConditionCheck invertibility;  // L max_t ‖A(t)⁻¹‖ < 1
};

[[nodiscard]] ConditionReport check_conditions(const GrowthCertificate& growth, const NonlinearityBounds& bounds,
                                               double max_inverse_norm);

/// max over t ∈ [t_min, t_max) of ‖A(t)⁻¹‖ from the (t+1)-norm to the t-norm.
[[nodiscard]] double max_inverse_step_norm(const SemilinearSystem& sys, const Omega& w);

/// Discrete Gronwall estimate. With c[i] = c(κ+i), returns for every k ≥ κ
///     (1+b)^{k−κ} c(κ) + Σ_{i=κ+1}^{k} (1+b)^{k−i} (c(i) − c(i−1)),
/// which bounds every a with a(k) ≤ c(k) + b Σ_{i=κ}^{k−1} a(i).
[[nodiscard]] std::vector<double> gronwall_bound(std::span<const double> c, double b);

struct GronwallCheck {
    bool premise_holds = true;
    bool bound_holds = true;
    /// max_k (a(k) − bound(k)); non-positive when the bound holds.
    double worst_excess = 0.0;
    std::size_t worst_index = 0;
};

[[nodiscard]] GronwallCheck check_gronwall(std::span<const double> a, std::span<const double> c, double b);

}  // namespace conjlab
