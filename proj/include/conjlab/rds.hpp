#pragma once

// Discrete random dynamical systems over sampled shift bases: cocycles,
// Lyapunov spectra and Oseledets splittings, the adapted random norm, and the
// linearization h of x_{t+1} = A(θᵗω)x_t + F(θᵗω, x_t).

#include "conjlab/conjugacy.hpp"
#include "conjlab/smooth.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace conjlab {

enum class MdsKind { bernoulli, rotation };

/// Ergodic base (Ω, θ). A sample ω = {path, shift} reads a two-sided stream
/// indexed by ω.shift; θⁿ adds n to the shift. Streams are counter based, so
/// every position is available without materializing the stream.
class ShiftMDS {
public:
    /// i.i.d. symbols 0..k−1 with the given probabilities.
    static ShiftMDS bernoulli(std::vector<double> probabilities, std::uint64_t seed);
    /// Phase x_n = x_0 + n·angle/(2π) mod 1, with x_0 drawn per path.
    static ShiftMDS rotation(double angle, std::uint64_t seed);

    [[nodiscard]] MdsKind kind() const { return kind_; }
    [[nodiscard]] std::uint64_t seed() const { return seed_; }
    [[nodiscard]] const std::vector<double>& probabilities() const { return probabilities_; }
    [[nodiscard]] double angle() const { return angle_; }

    /// Uniform variate attached to position ω.shift of path ω.path.
    [[nodiscard]] double uniform(const Omega& w) const;
    [[nodiscard]] std::size_t symbol(const Omega& w) const;
    /// Rotation phase in [0, 1).
    [[nodiscard]] double phase(const Omega& w) const;
    /// The i-th sample point {i, 0}.
    [[nodiscard]] Omega sample(std::size_t i) const { return {static_cast<std::uint64_t>(i), 0}; }
    [[nodiscard]] static Omega theta(const Omega& w, Time n) { return w.shifted(n); }

    /// Symbols (or phases) at positions [from, from + length) of a path.
    [[nodiscard]] std::vector<double> window(std::uint64_t path, Time from, std::size_t length) const;

private:
    ShiftMDS() = default;

    MdsKind kind_ = MdsKind::bernoulli;
    std::uint64_t seed_ = 0;
    std::vector<double> probabilities_;
    std::vector<double> cumulative_;
    double angle_ = 0.0;
};

/// Linear cocycle generated by A(ω); Φ(n,ω) = A(θ^{n−1}ω)⋯A(ω).
struct Cocycle {
    int dim = 1;
    std::shared_ptr<const ShiftMDS> mds;
    std::function<Mat(const ShiftMDS&, const Omega&)> generator;

    [[nodiscard]] Mat A(const Omega& w) const;
};

/// Φ(n,ω) for any integer n; negative n uses A(θⁿω)⁻¹⋯A(θ⁻¹ω)⁻¹.
[[nodiscard]] Mat cocycle_products(const Cocycle& c, Time n, const Omega& w);

struct IntegrabilityReport {
    double mean_log_plus_A = 0.0;
    double mean_log_plus_A_inv = 0.0;
    bool finite = true;
};

/// Sample means of log⁺‖A‖ and log⁺‖A⁻¹‖ along the given paths.
[[nodiscard]] IntegrabilityReport check_integrability(const Cocycle& c, std::size_t paths, std::size_t length);

struct SpectrumOptions {
    std::size_t n_steps = 10000;
    std::size_t n_samples = 64;
    /// Halves may differ by 5× the half-width plus allowance/(n_steps/2),
    /// which absorbs the O(1/n) transient of deterministic non-normal cocycles.
    double transient_allowance = 10.0;
    /// Steps of the QR sweeps that build the splitting at a point.
    std::size_t splitting_steps = 400;
    bool require_negative = false;
};

struct SpectrumReport {
    /// Distinct exponents, decreasing.
    std::vector<double> lambdas;
    std::vector<int> multiplicities;
    std::vector<double> half_widths;
    /// All d raw exponents (sample means), decreasing, with their half-widths.
    std::vector<double> raw_exponents;
    std::vector<double> raw_half_widths;
    double gap_parameter = 0.0;
    std::size_t n_steps = 0;
    std::size_t n_samples = 0;
    /// max over exponents of |first-half mean − second-half mean|
    double drift = 0.0;
    /// Bases of V_i(ω₀) (d × (d − D_{i−1})) and U_i(ω₀) (d × d_i) at ω₀ = {0,0}.
    std::vector<Mat> filtration;
    std::vector<Mat> splitting;
    /// Running exponent estimates every trace_every steps for ω₀, for plotting.
    std::vector<std::vector<double>> trace;
    std::size_t trace_every = 100;
    IntegrabilityReport integrability;

    [[nodiscard]] bool all_negative() const;
    [[nodiscard]] int dim() const;
    /// D_i = d_1 + … + d_i (D_0 = 0).
    [[nodiscard]] int cumulative(std::size_t i) const;
};

/// Benettin QR estimate over n_samples paths. Throws NotConverged when the two
/// halves drift apart, CertificateError when require_negative fails.
[[nodiscard]] SpectrumReport lyapunov_spectrum(const Cocycle& c, const SpectrumOptions& options = {});

/// Oseledets bases along a segment of one path: at every position p in
/// [lo, hi], columns of basis(p) split into blocks U_1(θᵖω), …, U_k(θᵖω).
class OseledetsFrame {
public:
    OseledetsFrame(const Cocycle& c, const SpectrumReport& spectrum, const Omega& w, Time lo, Time hi,
                   std::size_t sweep_steps);

    [[nodiscard]] Time lo() const { return lo_; }
    [[nodiscard]] Time hi() const { return hi_; }
    /// [B_1 … B_k] at θᵖω.
    [[nodiscard]] const Mat& basis(Time p) const;
    [[nodiscard]] Mat block(std::size_t i, Time p) const;
    /// Orthonormal basis of V_i(θᵖω).
    [[nodiscard]] Mat filtration(std::size_t i, Time p) const;
    /// C_i(p) with A(θᵖω)B_i(p) ≈ B_i(p+1)C_i(p).
    [[nodiscard]] Mat restricted_step(std::size_t i, Time p) const;
    /// Largest off-diagonal block of S(p+1)⁻¹A S(p), relative to ‖A‖.
    [[nodiscard]] double invariance_defect() const { return defect_; }

private:
    std::size_t index(Time p) const;

    Cocycle cocycle_;
    Omega w_;
    Time lo_;
    Time hi_;
    std::vector<int> offsets_;
    std::vector<Mat> bases_;
    std::vector<Mat> slow_;
    std::vector<std::vector<Mat>> steps_;
    double defect_ = 0.0;
};

struct RandomNormOptions {
    /// Two-sided series Σ_{t∈ℤ}‖Φ(t)u‖² e^{−2λt−2a|t|}; false gives the one-sided t ≥ 0 series.
    bool two_sided = true;
    double tail_tolerance = 1e-10;
    Time initial_horizon = 64;
    Time horizon_cap = 8192;
    std::size_t sweep_steps = 400;
};

/// |x|_{θᵗω} for t in a window around one ω. Its weight is
/// W(t) = S⁻ᵀ blockdiag(Q_1, …, Q_k) S⁻¹ with S = [B_1 … B_k] and
/// Q_i the Gram matrix of the truncated series on U_i.
class RandomNorm {
public:
    RandomNorm(const Cocycle& c, const SpectrumReport& spectrum, const Omega& w, Time t_lo, Time t_hi,
               const RandomNormOptions& options = {});

    [[nodiscard]] const Omega& omega() const { return w_; }
    [[nodiscard]] Time t_lo() const { return t_lo_; }
    [[nodiscard]] Time t_hi() const { return t_hi_; }
    [[nodiscard]] Time horizon() const { return horizon_; }
    /// Largest estimated relative tail over all positions and components.
    [[nodiscard]] double tail_bound() const { return tail_; }
    [[nodiscard]] const OseledetsFrame& frame() const { return *frame_; }

    [[nodiscard]] Mat weight(Time t) const;
    /// Gram matrix of |·|_{θᵗω} on U_i in the coordinates of block(i, t).
    [[nodiscard]] const Mat& gram(std::size_t i, Time t) const;
    [[nodiscard]] double norm(const Vec& x, Time t) const;
    /// Restricted norm of u = B_i c.
    [[nodiscard]] double component_norm(std::size_t i, const Vec& c, Time t) const;
    /// B_ε(θᵗω) = smallest B with ‖x‖/B ≤ |x| ≤ B‖x‖.
    [[nodiscard]] double equivalence(Time t) const;
    /// ‖·‖_{t,ω'} := |·|_{θᵗω'} for ω' on the same path.
    [[nodiscard]] NormFamily family() const;

private:
    std::size_t index(Time t) const;

    Omega w_;
    Time t_lo_;
    Time t_hi_;
    Time horizon_ = 0;
    double tail_ = 0.0;
    std::shared_ptr<OseledetsFrame> frame_;
    std::vector<std::vector<Mat>> gram_;
    std::vector<Mat> weights_;
};

[[nodiscard]] RandomNorm adapted_random_norm(const Cocycle& c, const SpectrumReport& spectrum, const Omega& w,
                                             Time t_lo, Time t_hi, const RandomNormOptions& options = {});

struct RandomEstCheck {
    /// Per component i: worst ratio of sup|Φ(t)|_{U_i}| to e^{(λ_i+a)t} and of
    /// e^{(λ_i−a)t} to it; both ≤ 1 when the sandwich holds.
    std::vector<double> worst_upper;
    std::vector<double> worst_lower;
    /// Same lower check for the smallest restricted stretch (inf instead of sup).
    std::vector<double> worst_lower_inf;
    std::size_t violations = 0;
    double slack = 0.0;
};

/// Checks e^{(λ_i−a)t} ≤ |Φ(t,ω)|_{U_i(ω)}| ≤ e^{(λ_i+a)t} for t = 0..t_max with
/// relative slack `slack`.
[[nodiscard]] RandomEstCheck check_random_est(const RandomNorm& norm, const SpectrumReport& spectrum, Time t_max,
                                              double slack);

/// max over t of |ln B(θᵗω) − ln B(ω)| / |t| on the norm's window.
[[nodiscard]] double estimate_epsilon(const RandomNorm& norm);

/// Nonlinear RDS x ↦ A(ω)x + F(ω,x) over a shift base.
struct RandomSystem {
    Cocycle linear;
    std::function<Vec(const ShiftMDS&, const Omega&, const Vec&)> nonlinear;
    std::function<Mat(const ShiftMDS&, const Omega&, const Vec&)> jacobian;

    /// ψ(t, ω, x) for t ≥ 0.
    [[nodiscard]] Vec psi(Time t, const Omega& w, const Vec& x) const;
    /// The nonautonomous equation x_{t+1} = A(θᵗω)x_t + F(θᵗω,x_t) on `window`.
    [[nodiscard]] SemilinearSystem as_system(const TimeWindow& window, NormFamily norms) const;
};

struct EquivalenceCheck {
    double residual = 0.0;
    /// (t, τ, ‖x‖) of the worst sample.
    Time t = 0;
    Time tau = 0;
    double x_norm = 0.0;
};

/// Reads A(ω) = A_ω(0) and F(ω,·) = F_ω(0,·) from the system, then checks
/// φ_ω(t,τ,x) = φ_{θ^τω}(t−τ,0,x) on samples. Throws InvalidArgument with the
/// worst triple when the residual exceeds `tolerance`.
[[nodiscard]] RandomSystem rds_from_system(const SemilinearSystem& sys, std::shared_ptr<const ShiftMDS> mds,
                                           const SamplingSpec& sampling, EquivalenceCheck* check = nullptr,
                                           double tolerance = 1e-12);

/// A refused construction with every condition that was evaluated.
class LinearizationRefused : public Error {
public:
    LinearizationRefused(const std::string& what, std::vector<ConditionCheck> checks);
    std::vector<ConditionCheck> checks;
};

struct RdsOptions {
    BoundsOptions bounds;
    RandomNormOptions norm;
    /// Reused instead of building a norm when it sits at ω and covers the window.
    std::shared_ptr<RandomNorm> precomputed_norm;
    VerifyOptions verify;
    SolverOptions solver{1e-12, 100000};
    bool smooth = false;
    SmoothOptions smooth_options;
};

struct RdsLinearization {
    std::shared_ptr<RandomNorm> norm;
    std::shared_ptr<ConjugacySolution> solution;
    double alpha = 0.0;
    std::vector<ConditionCheck> checks;
    /// max over window pairs of ‖Φ_ω(t,s)‖_{s,t,ω} / e^{(λ₁+a)(t−s)}
    double growth_worst_ratio = 0.0;
    double near_identity_bound = 0.0;
    VerificationReport verification;
    std::optional<SmoothnessReport> smoothness;

    /// h(θᵗω, ξ) = H_ω(t, ξ) and its inverse.
    [[nodiscard]] Vec h(Time t, const Vec& xi) const { return solution->H(t, xi); }
    [[nodiscard]] Vec h_inv(Time t, const Vec& eta) const { return solution->G(t, eta); }
};

/// Builds h, h⁻¹ at ω on `window` with the certificate K = 1, α = e^{λ₁+a}
/// in the adapted norm. Requires L ≤ α, KL < 1−α and L‖A⁻¹‖ < 1 (and
/// M₁K < 1−α in smooth mode); otherwise throws LinearizationRefused.
[[nodiscard]] RdsLinearization rds_linearize(const RandomSystem& rds, const SpectrumReport& spectrum, const Omega& w,
                                             const TimeWindow& window, const RdsOptions& options = {});

}  // namespace conjlab
