#include "conjlab/conjugacy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace conjlab {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

Time series_start(const SemilinearSystem& sys) { return sys.window.tau0(); }

void require_series_time(const SemilinearSystem& sys, Time t, const char* what)
{
    sys.window.require(t, what);
    if (t < series_start(sys)) {
        throw InvalidArgument(std::string(what) + ": time " + std::to_string(t) + " precedes tau0 " +
                              std::to_string(series_start(sys)));
    }
}

double sup_distance(const BoundedSequence& a, const BoundedSequence& b, const SemilinearSystem& sys, const Omega& w)
{
    double d = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        d = std::max(d, sys.norms.norm(a.values[i] - b.values[i], a.t0 + static_cast<Time>(i), w));
    }
    return d;
}

std::vector<double> key_of(const Vec& x) { return {x.data(), x.data() + x.size()}; }

}  // namespace

// ---------------------------------------------------------------------------
// Sequences and operators

const Vec& BoundedSequence::at(Time t) const
{
    if (t < t0 || t > t_end()) {
        throw InvalidArgument("sequence has no value at time " + std::to_string(t));
    }
    return values[static_cast<std::size_t>(t - t0)];
}

void update_norm(BoundedSequence& seq, const SemilinearSystem& sys, const Omega& w)
{
    double n = 0.0;
    for (std::size_t i = 0; i < seq.values.size(); ++i) {
        n = std::max(n, sys.norms.norm(seq.values[i], seq.t0 + static_cast<Time>(i), w));
    }
    seq.norm_omega = n;
}

BoundedSequence lift_sequence(const SemilinearSystem& sys, const Vec& xi, Time tau, const Omega& w)
{
    sys.window.require(tau, "lift_sequence");
    if (xi.size() != sys.dim) throw InvalidArgument("lift_sequence: state has the wrong dimension");
    const Time start = std::min(series_start(sys), tau);
    const Time end = sys.window.t_max();
    std::vector<Vec> full(static_cast<std::size_t>(end - start + 1));
    const auto idx = [start](Time t) { return static_cast<std::size_t>(t - start); };
    full[idx(tau)] = xi;
    for (Time t = tau; t < end; ++t) full[idx(t + 1)] = step_matrix(sys, t, w) * full[idx(t)];
    for (Time t = tau - 1; t >= start; --t) full[idx(t)] = inverse_step_matrix(sys, t, w) * full[idx(t + 1)];

    BoundedSequence seq;
    seq.t0 = series_start(sys);
    seq.values.assign(full.begin() + static_cast<std::ptrdiff_t>(idx(seq.t0)), full.end());
    update_norm(seq, sys, w);
    return seq;
}

BoundedSequence substitution_operator(const SemilinearSystem& sys, const BoundedSequence& phi, const Omega& w)
{
    const Time t0 = series_start(sys);
    if (phi.t0 != t0 || phi.t_end() != sys.window.t_max()) {
        throw InvalidArgument("substitution_operator: sequence does not cover [tau0, t_max]");
    }
    // z(τ₀) = 0, z(t+1) = A(t) z(t) + F(t, φ(t)) equals the series term by term.
    BoundedSequence out;
    out.t0 = t0;
    out.values.resize(phi.values.size());
    out.values[0] = Vec::Zero(sys.dim);
    for (std::size_t i = 0; i + 1 < phi.values.size(); ++i) {
        const Time t = t0 + static_cast<Time>(i);
        out.values[i + 1] = step_matrix(sys, t, w) * out.values[i] + nonlinear_term(sys, t, w, phi.values[i]);
    }
    update_norm(out, sys, w);
    return out;
}

PhiStar solve_phi_star(const SemilinearSystem& sys, const Vec& xi, Time tau, const Omega& w,
                       const GrowthCertificate& growth, const NonlinearityBounds& bounds, const SolverOptions& solver)
{
    const double q = growth.K * bounds.L / (1.0 - growth.alpha);
    if (!(q < 1.0) || !(growth.alpha < 1.0)) {
        throw ContractionViolated("fixed-point operator (KL/(1-alpha))", q);
    }
    const BoundedSequence lift = lift_sequence(sys, xi, tau, w);

    PhiStar result;
    BoundedSequence phi;
    phi.t0 = lift.t0;
    phi.values.assign(lift.values.size(), Vec::Zero(sys.dim));

    BoundedSequence shifted = lift;
    double first = 0.0;
    double delta = 0.0;
    for (std::size_t n = 1; n <= solver.max_iterations; ++n) {
        for (std::size_t i = 0; i < phi.values.size(); ++i) shifted.values[i] = phi.values[i] + lift.values[i];
        BoundedSequence next = substitution_operator(sys, shifted, w);
        delta = sup_distance(next, phi, sys, w);
        if (n == 1) first = delta;
        phi = std::move(next);
        result.iterations = n;
        const double a_post = q < 1.0 && q > 0.0 ? q / (1.0 - q) * delta : delta;
        if (delta == 0.0 || a_post <= solver.tolerance || delta <= 8.0 * kEps * phi.norm_omega) {
            result.a_posteriori_error = a_post;
            result.a_priori_error = std::pow(q, static_cast<double>(n)) / (1.0 - q) * first;
            result.sequence = std::move(phi);
            return result;
        }
    }
    throw NotConverged("solve_phi_star", solver.max_iterations, q, delta);
}

// ---------------------------------------------------------------------------
// ConjugacySolution

ConjugacySolution::ConjugacySolution(SemilinearSystem sys, Omega w, GrowthCertificate growth,
                                     NonlinearityBounds bounds, ConjugacyOptions options)
    : sys_(std::move(sys)),
      w_(w),
      growth_(std::move(growth)),
      bounds_(std::move(bounds)),
      options_(std::move(options)),
      cache_(std::make_unique<Cache>())
{
    sys_.validate(w_);
    const double q = growth_.K * bounds_.L / (1.0 - growth_.alpha);
    if (!(growth_.alpha < 1.0) || !(q < 1.0)) throw ContractionViolated("conjugacy construction (KL/(1-alpha))", q);
    cache_->diag.q = q;
}

ConjugacySolution ConjugacySolution::build(SemilinearSystem sys, Omega w, const ConjugacyOptions& options)
{
    sys.validate(w);
    GrowthCertificate growth = certify_bounded_growth(sys, w);
    NonlinearityBounds bounds = estimate_nonlinearity_bounds(sys, w, options.bounds);
    return ConjugacySolution(std::move(sys), w, std::move(growth), std::move(bounds), options);
}

ConjugacyDiagnostics ConjugacySolution::diagnostics() const
{
    std::lock_guard lock(cache_->mutex);
    return cache_->diag;
}

double ConjugacySolution::near_identity_bound() const
{
    return growth_.K * bounds_.M / (1.0 - growth_.alpha);
}

InvertOptions ConjugacySolution::invert_options() const
{
    InvertOptions opts;
    opts.solver = options_.solver;
    opts.lipschitz = bounds_.L;
    return opts;
}

BoundedSequence ConjugacySolution::phi_star(Time tau, const Vec& xi) const
{
    auto key = std::make_pair(tau, key_of(xi));
    {
        std::lock_guard lock(cache_->mutex);
        if (auto it = cache_->entries.find(key); it != cache_->entries.end()) return it->second;
    }
    PhiStar solved = solve_phi_star(sys_, xi, tau, w_, growth_, bounds_, options_.solver);
    std::lock_guard lock(cache_->mutex);
    auto& d = cache_->diag;
    ++d.solves;
    d.max_iterations = std::max(d.max_iterations, solved.iterations);
    d.max_a_priori_error = std::max(d.max_a_priori_error, solved.a_priori_error);
    d.max_a_posteriori_error = std::max(d.max_a_posteriori_error, solved.a_posteriori_error);
    if (cache_->entries.size() >= options_.cache_limit) cache_->entries.clear();
    cache_->entries.emplace(std::move(key), solved.sequence);
    return solved.sequence;
}

Vec ConjugacySolution::H(Time t, const Vec& xi) const
{
    require_series_time(sys_, t, "forward_conjugacy");
    return xi + phi_star(t, xi).at(t);
}

std::vector<Vec> ConjugacySolution::backward_orbit(Time t, const Vec& eta) const
{
    require_series_time(sys_, t, "backward_orbit");
    const Time t0 = series_start(sys_);
    std::vector<Vec> orbit(static_cast<std::size_t>(t - t0 + 1));
    orbit.back() = eta;
    const InvertOptions opts = invert_options();
    for (Time s = t - 1; s >= t0; --s) {
        orbit[static_cast<std::size_t>(s - t0)] = invert_step(sys_, s, w_, orbit[static_cast<std::size_t>(s - t0 + 1)], opts);
    }
    return orbit;
}

Vec ConjugacySolution::G(Time t, const Vec& eta) const
{
    const std::vector<Vec> orbit = backward_orbit(t, eta);
    const Time t0 = series_start(sys_);
    Vec z = Vec::Zero(sys_.dim);
    for (Time s = t0; s < t; ++s) {
        z = step_matrix(sys_, s, w_) * z + nonlinear_term(sys_, s, w_, orbit[static_cast<std::size_t>(s - t0)]);
    }
    return eta - z;
}

Vec forward_conjugacy(const ConjugacySolution& sol, Time t, const Vec& xi) { return sol.H(t, xi); }

Vec inverse_conjugacy(const ConjugacySolution& sol, Time t, const Vec& eta) { return sol.G(t, eta); }

// ---------------------------------------------------------------------------
// Verification

void ResidualStat::add(double value)
{
    max = std::max(max, value);
    ++count;
    mean += (value - mean) / static_cast<double>(count);
}

bool VerificationReport::conjugation_pass() const
{
    return conjugation_H.max <= composition_tolerance && conjugation_G.max <= composition_tolerance &&
           round_trip_GH.max <= composition_tolerance && round_trip_HG.max <= composition_tolerance;
}

bool VerificationReport::near_identity_pass() const
{
    const double limit = near_identity_bound + composition_tolerance;
    return near_identity_H.max <= limit && near_identity_G.max <= limit;
}

namespace {

struct LipschitzTracker {
    LipschitzComparison cmp;
    double worst_fraction = 0.0;

    void add(double ratio, double formula)
    {
        cmp.empirical = std::max(cmp.empirical, ratio);
        const double fraction = ratio / formula;
        if (fraction >= worst_fraction) {
            worst_fraction = fraction;
            cmp.formula = formula;
        }
        if (ratio > formula * (1.0 + 1e-9)) {
            ++cmp.violations;
            cmp.holds = false;
        }
    }
};

Vec partner(Sampler& rng, const Vec& x, double radius, bool close)
{
    if (!close) return rng.in_ball(static_cast<int>(x.size()), radius);
    const double sep = radius * std::pow(10.0, -rng.uniform(0.0, 6.0));
    return x + sep * rng.unit(static_cast<int>(x.size()));
}

}  // namespace

VerificationReport verify_conjugacy(const ConjugacySolution& sol, const VerifyOptions& options)
{
    const SemilinearSystem& sys = sol.system();
    const Omega& w = sol.omega();
    const Time t0 = sys.window.tau0();
    const Time t1 = sys.window.t_max();
    const double K = sol.growth().K;
    const double alpha = sol.growth().alpha;
    const double L = sol.bounds().L;
    const double radius = options.sampling.radius;
    const InvertOptions inv = sol.invert_options();

    VerificationReport rep;
    rep.near_identity_bound = sol.near_identity_bound();
    rep.composition_tolerance = options.composition_tolerance;

    const auto record = [&](ResidualStat& stat, const char* kind, Time t, Time s, const Vec& x, double r) {
        stat.add(r);
        if (options.keep_samples) rep.samples.push_back({kind, t, s, x.norm(), r});
    };

    Sampler rng(options.sampling.seed);
    for (std::size_t i = 0; i < options.sampling.points; ++i) {
        const Time t = rng.time(t0, t1);
        const Time s = rng.time(t0, t);
        const Vec xi = rng.in_ball(sys.dim, radius);

        const Vec Hs = sol.H(s, xi);
        const Vec lhs_a = sol.H(t, evolution_operator(sys, t, s, w) * xi);
        const Vec rhs_a = general_solution(sys, t, s, w, Hs, inv);
        record(rep.conjugation_H, "conjugation_H", t, s, xi, (lhs_a - rhs_a).norm());

        const Vec lhs_b = sol.G(t, general_solution(sys, t, s, w, xi, inv));
        const Vec rhs_b = evolution_operator(sys, t, s, w) * sol.G(s, xi);
        record(rep.conjugation_G, "conjugation_G", t, s, xi, (lhs_b - rhs_b).norm());

        const Vec Ht = sol.H(t, xi);
        const Vec Gt = sol.G(t, xi);
        record(rep.round_trip_GH, "round_trip_GH", t, t, xi, (sol.G(t, Ht) - xi).norm());
        record(rep.round_trip_HG, "round_trip_HG", t, t, xi, (sol.H(t, Gt) - xi).norm());
        record(rep.near_identity_H, "near_identity_H", t, t, xi, sys.norms.norm(Ht - xi, t, w));
        record(rep.near_identity_G, "near_identity_G", t, t, xi, sys.norms.norm(Gt - xi, t, w));
    }

    // Lipschitz ratios against both printed forms of each constant.
    const double KL = K * L;
    LipschitzTracker lg_boxed{{"L_G boxed: 1+K^2 L e^{KL/(1-a)}/(1-a^2)"}};
    LipschitzTracker lg_inline{{"L_G inline: 1+K^2 L/(1-a)"}};
    LipschitzTracker lh_boxed{{"L_H with a^{tau0-tau} l(tau)"}};
    LipschitzTracker lh_plain{{"L_H without a^{tau0-tau}"}};
    const double LG1 = 1.0 + K * K * L / (1.0 - alpha * alpha) * std::exp(KL / (1.0 - alpha));
    const double LG2 = 1.0 + K * K * L / (1.0 - alpha);
    for (std::size_t i = 0; i < options.lipschitz_pairs; ++i) {
        const Time t = rng.time(t0, t1);
        const Vec x = rng.in_ball(sys.dim, radius);
        const Vec y = partner(rng, x, radius, i % 2 == 1);
        const double dx = sys.norms.norm(x - y, t, w);
        if (dx == 0.0) continue;
        const double ell = sys.norms.ell(t, w);
        const double head = 1.0 + K * K * L / (1.0 - alpha);
        const double tail = K * K * K * L * L * ell / ((1.0 - alpha) * (1.0 - KL));
        const double rH = sys.norms.norm(sol.H(t, x) - sol.H(t, y), t, w) / dx;
        lh_boxed.add(rH, head + tail * std::pow(alpha, static_cast<double>(t0 - t)));
        lh_plain.add(rH, head + tail);
        const double rG = sys.norms.norm(sol.G(t, x) - sol.G(t, y), t, w) / dx;
        lg_boxed.add(rG, LG1);
        lg_inline.add(rG, LG2);
    }
    rep.lipschitz = {lh_boxed.cmp, lh_plain.cmp, lg_boxed.cmp, lg_inline.cmp};

    // Forward growth of solution differences, ‖φ(t,s,η)−φ(t,s,η̄)‖ ≤ K(α+KL)^{t−s}‖η−η̄‖.
    for (std::size_t i = 0; i < options.gronwall_pairs; ++i) {
        const Time s = rng.time(t0, t1);
        const Time t = rng.time(s, t1);
        const Vec x = rng.in_ball(sys.dim, radius);
        const Vec y = partner(rng, x, radius, i % 2 == 1);
        const double d0 = sys.norms.norm(x - y, s, w);
        if (d0 == 0.0) continue;
        const Vec px = general_solution(sys, t, s, w, x);
        const Vec py = general_solution(sys, t, s, w, y);
        const double bound = K * std::pow(alpha + KL, static_cast<double>(t - s)) * d0;
        const double d1 = sys.norms.norm(px - py, t, w);
        rep.gronwall_ratio.add(d1 / bound);
        const double slack = 16.0 * kEps * std::max(px.norm(), py.norm()) * sys.norms.ell(t, w);
        if (d1 > bound * (1.0 + 1e-12) + slack) ++rep.gronwall_violations;
    }
    return rep;
}

}  // namespace conjlab
