#pragma once

// Construction of the conjugacy H_ω(t,·) between the linear equation
// x_{t+1} = A_ω(t)x_t and the semilinear one, and of its inverse G_ω(t,·).
//
//     H(t,ξ) = ξ + φ*_{t}(ξ)(t),   φ* = fixed point of φ ↦ 𝓕(φ + 𝓛_t ξ)
//     G(t,η) = η − Σ_{s=τ₀}^{t−1} Φ(t,s+1) F(s, φ(s,t,η))
//
// Sequences live on [τ₀, t_max] of the system window.

#include "conjlab/hypotheses.hpp"
#include "conjlab/system_core.hpp"

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace conjlab {

/// A state sequence on [t0, t0 + size) with its sup norm sup_t ‖x(t)‖_{t,ω}.
struct BoundedSequence {
    Time t0 = 0;
    std::vector<Vec> values;
    double norm_omega = 0.0;

    [[nodiscard]] const Vec& at(Time t) const;
    [[nodiscard]] Time t_end() const { return t0 + static_cast<Time>(values.size()) - 1; }
};

/// Recomputes norm_omega of `seq` in the system's norm family.
void update_norm(BoundedSequence& seq, const SemilinearSystem& sys, const Omega& w);

/// 𝓛_τ ξ: t ↦ Φ(t,τ)ξ on [τ₀, t_max].
[[nodiscard]] BoundedSequence lift_sequence(const SemilinearSystem& sys, const Vec& xi, Time tau, const Omega& w);

/// 𝓕(φ)(t) = Σ_{s=τ₀}^{t−1} Φ(t,s+1) F(s, φ(s)) on [τ₀, t_max].
[[nodiscard]] BoundedSequence substitution_operator(const SemilinearSystem& sys, const BoundedSequence& phi,
                                                    const Omega& w);

struct PhiStar {
    BoundedSequence sequence;
    std::size_t iterations = 0;
    /// q^n/(1−q) times the first displacement.
    double a_priori_error = 0.0;
    /// q/(1−q) times the last displacement.
    double a_posteriori_error = 0.0;
};

/// Fixed point of φ ↦ 𝓕(φ + 𝓛_τ ξ) by Picard iteration from φ = 0.
/// Throws ContractionViolated unless q = KL/(1−α) < 1 and NotConverged when
/// the iteration budget runs out.
[[nodiscard]] PhiStar solve_phi_star(const SemilinearSystem& sys, const Vec& xi, Time tau, const Omega& w,
                                     const GrowthCertificate& growth, const NonlinearityBounds& bounds,
                                     const SolverOptions& solver = {});

struct ConjugacyOptions {
    SolverOptions solver;
    BoundsOptions bounds;
    /// Cached φ* sequences kept before the cache is flushed.
    std::size_t cache_limit = 4096;
};

struct ConjugacyDiagnostics {
    double q = 0.0;
    std::size_t solves = 0;
    std::size_t max_iterations = 0;
    double max_a_priori_error = 0.0;
    double max_a_posteriori_error = 0.0;
};

/// H and G of one system at one ω, with the constants they were built from.
/// Evaluation is thread-safe; the φ* cache is guarded by a mutex.
class ConjugacySolution {
public:
    ConjugacySolution(SemilinearSystem sys, Omega w, GrowthCertificate growth, NonlinearityBounds bounds,
                      ConjugacyOptions options = {});

    /// Certifies (K, α) and (M, L, M_j) on the system first.
    [[nodiscard]] static ConjugacySolution build(SemilinearSystem sys, Omega w, const ConjugacyOptions& options = {});

    [[nodiscard]] const SemilinearSystem& system() const { return sys_; }
    [[nodiscard]] const Omega& omega() const { return w_; }
    [[nodiscard]] const GrowthCertificate& growth() const { return growth_; }
    [[nodiscard]] const NonlinearityBounds& bounds() const { return bounds_; }
    [[nodiscard]] const ConjugacyOptions& options() const { return options_; }
    [[nodiscard]] ConjugacyDiagnostics diagnostics() const;

    /// KM/(1−α)
    [[nodiscard]] double near_identity_bound() const;
    /// Options for backward steps, carrying the certified L.
    [[nodiscard]] InvertOptions invert_options() const;

    [[nodiscard]] BoundedSequence phi_star(Time tau, const Vec& xi) const;
    [[nodiscard]] Vec H(Time t, const Vec& xi) const;
    [[nodiscard]] Vec G(Time t, const Vec& eta) const;

    /// φ(s, t, η) for s = τ₀..t, indexed by s − τ₀.
    [[nodiscard]] std::vector<Vec> backward_orbit(Time t, const Vec& eta) const;

private:
    struct Cache {
        std::mutex mutex;
        std::map<std::pair<Time, std::vector<double>>, BoundedSequence> entries;
        ConjugacyDiagnostics diag;
    };

    SemilinearSystem sys_;
    Omega w_;
    GrowthCertificate growth_;
    NonlinearityBounds bounds_;
    ConjugacyOptions options_;
    std::unique_ptr<Cache> cache_;
};

[[nodiscard]] Vec forward_conjugacy(const ConjugacySolution& sol, Time t, const Vec& xi);
[[nodiscard]] Vec inverse_conjugacy(const ConjugacySolution& sol, Time t, const Vec& eta);

/// Running max/mean of nonnegative residuals.
struct ResidualStat {
    double max = 0.0;
    double mean = 0.0;
    std::size_t count = 0;

    void add(double value);
};

/// An empirical Lipschitz ratio against one closed-form constant.
struct LipschitzComparison {
    std::string name;
    double empirical = 0.0;
    double formula = 0.0;
    bool holds = true;
    /// Pairs whose ratio exceeded the formula.
    std::size_t violations = 0;
};

/// One verification sample, kept for CSV output.
struct ResidualSample {
    std::string kind;
    Time t = 0;
    Time s = 0;
    double point_norm = 0.0;
    double residual = 0.0;
};

struct VerifyOptions {
    SamplingSpec sampling;
    std::size_t lipschitz_pairs = 1000;
    std::size_t gronwall_pairs = 1000;
    double composition_tolerance = 1e-8;
    bool keep_samples = true;
};

struct VerificationReport {
    ResidualStat conjugation_H;  // ‖H(t,Φ(t,s)ξ) − φ(t,s,H(s,ξ))‖
    ResidualStat conjugation_G;  // ‖G(t,φ(t,s,η)) − Φ(t,s)G(s,η)‖
    ResidualStat round_trip_GH;  // ‖G(t,H(t,ξ)) − ξ‖
    ResidualStat round_trip_HG;  // ‖H(t,G(t,η)) − η‖
    ResidualStat near_identity_H;
    ResidualStat near_identity_G;
    double near_identity_bound = 0.0;
    double composition_tolerance = 0.0;
    std::vector<LipschitzComparison> lipschitz;
    /// max of ‖φ(t,s,η)−φ(t,s,η̄)‖ / (K(α+KL)^{t−s}‖η−η̄‖)
    ResidualStat gronwall_ratio;
    std::size_t gronwall_violations = 0;
    std::vector<ResidualSample> samples;

    [[nodiscard]] bool conjugation_pass() const;
    [[nodiscard]] bool near_identity_pass() const;
};

[[nodiscard]] VerificationReport verify_conjugacy(const ConjugacySolution& sol, const VerifyOptions& options = {});

}  // namespace conjlab
