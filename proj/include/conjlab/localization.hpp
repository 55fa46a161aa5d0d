#pragma once

// Cut-off of nonlinearities that are only locally small near the fixed point
// 0, escape times of orbits from the random neighborhood U(ω), and local
// linearization checks built on the global construction for the truncated
// system.

#include "conjlab/rds.hpp"

#include <map>
#include <memory>
#include <vector>

namespace conjlab {

/// Smooth profile: 1 on [0,1], 0 on [2,∞), C^∞ in between. Returns exactly 1.0 for r ≤ 1.
[[nodiscard]] double bump(double r);

/// Weight of the state norm |x|_ω = sqrt(xᵀW(ω)x).
using StateWeight = std::function<Mat(const Omega&)>;

[[nodiscard]] StateWeight euclidean_weight(int dim);
/// |x|_{θᵗω} read from an adapted norm built at ω; other paths are rejected.
[[nodiscard]] StateWeight random_norm_weight(std::shared_ptr<const RandomNorm> norm);

struct CutoffOptions {
    double target_L = 0.1;
    /// A candidate σ is accepted when safety·Lip(f̃ on the 2σ ball) ≤ target_L.
    double safety = 1.05;
    int k_max = 50;
    int k_min = -60;
    std::size_t pairs = 600;
    std::size_t jacobian_points = 120;
    std::uint64_t seed = 13;
    /// The vanishing-quotient check compares Lip(F) on balls of radius 2^{-1} and 2^{-20}.
    double vanishing_ratio = 0.01;
};

struct VanishingCheck {
    double outer = 0.0;
    double inner = 0.0;
    bool vanishes = true;
};

/// f̃(ω,x) = χ(|x|_ω/σ(ω)) F(ω,x) with σ from a per-ω table and the table
/// minimum for every other ω.
class CutoffSystem {
public:
    CutoffSystem(RandomSystem original, StateWeight weight, double target_L, std::map<Omega, double> table);

    [[nodiscard]] const RandomSystem& original() const { return original_; }
    [[nodiscard]] double target_L() const { return target_L_; }
    [[nodiscard]] const std::map<Omega, double>& table() const { return table_; }
    [[nodiscard]] double fallback() const { return fallback_; }

    [[nodiscard]] double sigma(const Omega& w) const;
    [[nodiscard]] Mat weight(const Omega& w) const { return weight_(w); }
    [[nodiscard]] double norm(const Omega& w, const Vec& x) const;
    [[nodiscard]] bool inside(const Omega& w, const Vec& x) const { return norm(w, x) < sigma(w); }
    [[nodiscard]] Vec f_tilde(const Omega& w, const Vec& x) const;
    /// ψ̃ = Φ + f̃.
    [[nodiscard]] RandomSystem truncated() const;

private:
    RandomSystem original_;
    StateWeight weight_;
    double target_L_;
    std::map<Omega, double> table_;
    double fallback_;
};

/// Lip(F(ω,·)) on the ball of the given radius, measured from |·|_ω to |·|_{θω}.
[[nodiscard]] VanishingCheck vanishing_quotient(const RandomSystem& rds, const StateWeight& weight, const Omega& w,
                                                const CutoffOptions& options = {});

/// σ(ω) for every sampled ω by a dyadic scan from 2^{k_max} down, then
/// halved until sup|f̃|_{θω} ≤ 1. Throws InvalidArgument when F(ω,0) ≠ 0 or
/// the difference quotient does not vanish at the origin.
[[nodiscard]] CutoffSystem cutoff_nonlinearity(const RandomSystem& rds, const std::vector<Omega>& samples,
                                               StateWeight weight, const CutoffOptions& options = {});

struct CutoffCheck {
    /// max |f̃(x) − f̃(y)|_{θω} / |x − y|_ω over the sampled pairs.
    double lipschitz = 0.0;
    double sup = 0.0;
    /// f̃ == F bit for bit at every sampled point of U(ω).
    bool agrees_inside = true;
    std::size_t pairs = 0;
    std::size_t inside_points = 0;
};

/// Pairs split between the 2σ ball, pairs straddling the annulus σ ≤ |x| ≤ 2σ,
/// close pairs, and pairs reaching beyond 2σ.
[[nodiscard]] CutoffCheck verify_cutoff(const CutoffSystem& cut, const Omega& w, std::size_t pairs,
                                        std::uint64_t seed);

struct EscapeTime {
    /// Largest t ≤ cap with ψ(τ,ω,x) ∈ U(θ^τω) for all 0 ≤ τ ≤ t; −1 when x ∉ U(ω).
    Time last_inside = -1;
    bool reached_cap = false;
};

[[nodiscard]] EscapeTime escape_time(const RandomSystem& psi, const CutoffSystem& cut, const Omega& w, const Vec& x,
                                     Time cap);

enum class LocalMode { topological, smooth };

struct LocalOptions {
    RdsOptions rds;
    LocalMode mode = LocalMode::topological;
    std::size_t orbits = 20;
    std::uint64_t seed = 17;
    double tolerance = 1e-7;
};

struct LocalOrbit {
    double start_norm = 0.0;
    Time escape = -1;
    bool reached_cap = false;
    /// max over t ≤ escape of ‖h̃(t, Φ(t,ω)ξ) − ψ(t,ω,x)‖ with ξ = h̃⁻¹(0,x)
    double residual = 0.0;
    /// Same residual after the escape time; excluded from the verdict.
    double residual_after = 0.0;
    bool identical = true;
};

struct LocalReport {
    RdsLinearization global;
    std::vector<LocalOrbit> orbits;
    double max_residual = 0.0;
    double max_residual_after = 0.0;
    bool identical = true;
    std::size_t compared_steps = 0;
    double tolerance = 0.0;

    [[nodiscard]] bool pass() const { return identical && max_residual <= tolerance; }
};

/// Global linearization of ψ̃ at ω, checked against ψ on orbits from U(ω)
/// up to their escape times.
[[nodiscard]] LocalReport local_linearize(const CutoffSystem& cut, const SpectrumReport& spectrum, const Omega& w,
                                          const TimeWindow& window, const LocalOptions& options = {});

}  // namespace conjlab
