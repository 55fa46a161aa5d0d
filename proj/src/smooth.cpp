#include "conjlab/smooth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace conjlab {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

double scale_of(const Vec& x) { return std::max(1.0, x.cwiseAbs().maxCoeff()); }

double relative_error(const Vec& a, const Vec& b)
{
    const double den = std::max({a.norm(), b.norm(), 1e-12});
    return (a - b).norm() / den;
}

double binomial(int n, int k)
{
    double r = 1.0;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

double median(std::vector<double> v)
{
    if (v.empty()) return 0.0;
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

std::string bound_message(const std::string& what, double measured, double bound)
{
    std::ostringstream os;
    os << what << ": measured " << measured << " exceeds bound " << bound;
    return os.str();
}

}  // namespace

Mat variational_jacobian(const SemilinearSystem& sys, Time s, Time t, const Omega& w, const Vec& eta)
{
    sys.window.require(s, "variational_jacobian");
    sys.window.require(t, "variational_jacobian");
    if (t < s) throw InvalidArgument("variational_jacobian requires t >= s");
    Mat X = Mat::Identity(sys.dim, sys.dim);
    Vec x = eta;
    for (Time r = s; r < t; ++r) {
        X = (step_matrix(sys, r, w) + nonlinearity_jacobian(sys, r, w, x)) * X;
        x = step(sys, r, w, x);
    }
    return X;
}

double variational_bound(const GrowthCertificate& growth, double M1, Time s, Time t)
{
    return growth.K * std::pow(growth.alpha + growth.K * M1, static_cast<double>(t - s));
}

BoundViolated::BoundViolated(const std::string& what, double measured_, double bound_, Mat jacobian_)
    : Error(bound_message(what, measured_, bound_)), measured(measured_), bound(bound_), jacobian(std::move(jacobian_))
{
}

ConjugacyJacobian conjugacy_jacobian(const ConjugacySolution& sol, Time t, const Vec& eta,
                                     const JacobianOptions& options)
{
    const SemilinearSystem& sys = sol.system();
    const Omega& w = sol.omega();
    const double K = sol.growth().K;
    const double alpha = sol.growth().alpha;
    const double M1 = sol.bounds().derivative_bound(1);
    if (!(M1 * K < 1.0 - alpha)) {
        throw ContractionViolated("smooth condition M1*K < 1-alpha", M1 * K / (1.0 - alpha));
    }

    const std::vector<Vec> orbit = sol.backward_orbit(t, eta);
    const Time t0 = sys.window.tau0();
    const auto at = [t0](Time s) { return static_cast<std::size_t>(s - t0); };

    // Dx_s = ∂φ(s,t,η)/∂η, walking backward with (A + D₂F)⁻¹.
    std::vector<Mat> Dx(orbit.size());
    std::vector<Mat> DF(orbit.size());
    Dx.back() = Mat::Identity(sys.dim, sys.dim);
    for (Time s = t - 1; s >= t0; --s) {
        DF[at(s)] = nonlinearity_jacobian(sys, s, w, orbit[at(s)]);
        const Mat M = step_matrix(sys, s, w) + DF[at(s)];
        Eigen::PartialPivLU<Mat> lu(M);
        if (!(lu.rcond() > 1e-13)) throw SingularStep(s, lu.rcond());
        Dx[at(s)] = lu.solve(Dx[at(s + 1)]);
    }
    Mat Z = Mat::Zero(sys.dim, sys.dim);
    for (Time s = t0; s < t; ++s) Z = step_matrix(sys, s, w) * Z + DF[at(s)] * Dx[at(s)];

    ConjugacyJacobian out;
    out.jacobian = Mat::Identity(sys.dim, sys.dim) - Z;
    out.deviation = operator_norm(Z, t, t, w, sys.norms);
    out.bound = K * M1 / (1.0 - alpha);
    out.neumann_margin = 1.0 - out.deviation;
    if (options.enforce_bound && out.deviation > out.bound * (1.0 + 1e-12) + 1e-14) {
        throw BoundViolated("deviation |D2G - I| at t=" + std::to_string(t), out.deviation, out.bound, out.jacobian);
    }
    return out;
}

Vec Tensor::contract(const Vec& v) const
{
    Vec out = Vec::Zero(dim);
    std::size_t inputs = 1;
    for (int k = 0; k < order; ++k) inputs *= static_cast<std::size_t>(dim);
    for (std::size_t idx = 0; idx < inputs; ++idx) {
        double weight = 1.0;
        std::size_t rest = idx;
        for (int k = 0; k < order; ++k) {
            weight *= v(static_cast<Eigen::Index>(rest % static_cast<std::size_t>(dim)));
            rest /= static_cast<std::size_t>(dim);
        }
        for (int o = 0; o < dim; ++o) out(o) += weight * data[static_cast<std::size_t>(o) + dim * idx];
    }
    return out;
}

Vec central_difference(const std::function<Vec(const Vec&)>& f, const Vec& x, const Vec& v, int order, double h)
{
    if (order < 1) throw InvalidArgument("central_difference order must be at least 1");
    Vec acc;
    for (int k = 0; k <= order; ++k) {
        const double offset = (0.5 * order - k) * h;
        const Vec term = binomial(order, k) * f(x + offset * v);
        acc = k == 0 ? Vec((k % 2 == 0 ? 1.0 : -1.0) * term) : Vec(acc + (k % 2 == 0 ? 1.0 : -1.0) * term);
    }
    return acc / std::pow(h, order);
}

namespace {

Tensor jacobian_tensor(const ConjugacySolution& sol, Time t, const Vec& eta)
{
    const ConjugacyJacobian J = conjugacy_jacobian(sol, t, eta, {.enforce_bound = false});
    Tensor T;
    T.dim = sol.system().dim;
    T.order = 1;
    T.data.assign(J.jacobian.data(), J.jacobian.data() + J.jacobian.size());
    return T;
}

Tensor derivative_tensor(const ConjugacySolution& sol, Time t, const Vec& eta, int order)
{
    if (order == 1) return jacobian_tensor(sol, t, eta);
    const int d = sol.system().dim;
    const double h = default_fd_step(order) * scale_of(eta);
    Tensor T;
    T.dim = d;
    T.order = order;
    for (int i = 0; i < d; ++i) {
        Vec e = Vec::Zero(d);
        e(i) = h;
        const Tensor plus = derivative_tensor(sol, t, eta + e, order - 1);
        const Tensor minus = derivative_tensor(sol, t, eta - e, order - 1);
        for (std::size_t k = 0; k < plus.data.size(); ++k) T.data.push_back((plus.data[k] - minus.data[k]) / (2 * h));
    }
    return T;
}

}  // namespace

JacobianStack jacobian_stack(const ConjugacySolution& sol, Time t, const Vec& eta, int m, std::uint64_t seed)
{
    if (m < 1) throw InvalidArgument("jacobian_stack needs m >= 1");
    Sampler rng(seed);
    const Vec v = rng.unit(sol.system().dim);
    const auto G = [&](const Vec& x) { return sol.G(t, x); };
    JacobianStack stack;
    for (int j = 1; j <= m; ++j) {
        stack.derivatives.push_back(derivative_tensor(sol, t, eta, j));
        const Vec fd = central_difference(G, eta, v, j, default_fd_step(j) * scale_of(eta));
        stack.fd_agreement.push_back(relative_error(stack.derivatives.back().contract(v), fd));
    }
    return stack;
}

SmoothnessReport smoothness_report(const ConjugacySolution& sol, int m, const SmoothOptions& options)
{
    const SemilinearSystem& sys = sol.system();
    const Omega& w = sol.omega();
    if (m < 1) throw InvalidArgument("smoothness order m must be at least 1");
    if (m > 3 && !sys.nonlinear.derivative) {
        throw InvalidArgument("smoothness orders above 3 need analytic derivative oracles");
    }
    const Time t0 = sys.window.tau0();
    const Time t1 = sys.window.t_max();
    const double K = sol.growth().K;
    const double alpha = sol.growth().alpha;
    const double M1 = sol.bounds().derivative_bound(1);

    SmoothnessReport rep;
    rep.smooth_condition.name = "M1*K < 1-alpha";
    rep.smooth_condition.measured = M1 * K;
    rep.smooth_condition.threshold = 1.0 - alpha;
    rep.smooth_condition.margin = rep.smooth_condition.threshold - rep.smooth_condition.measured;
    rep.smooth_condition.pass = rep.smooth_condition.measured < rep.smooth_condition.threshold;
    rep.deviation_bound = K * M1 / (1.0 - alpha);
    if (!rep.smooth_condition.pass) {
        std::ostringstream os;
        os << "smooth condition M1*K < 1-alpha failed (measured " << rep.smooth_condition.measured << ", threshold "
           << rep.smooth_condition.threshold << ")";
        rep.failures.push_back(os.str());
        rep.verdict = "failed: " + rep.failures.front();
        return rep;
    }

    Sampler rng(options.sampling.seed);
    const std::size_t n = options.sampling.points;
    rep.orders.resize(static_cast<std::size_t>(m));
    std::vector<std::vector<double>> ratios(static_cast<std::size_t>(m));
    for (int j = 1; j <= m; ++j) rep.orders[static_cast<std::size_t>(j - 1)].order = j;

    for (std::size_t i = 0; i < n; ++i) {
        const Time t = rng.time(t0, t1);
        const Vec eta = rng.in_ball(sys.dim, options.sampling.radius);
        const Vec v = rng.unit(sys.dim);
        const Vec u = rng.unit(sys.dim);
        const auto G = [&](const Vec& x) { return sol.G(t, x); };
        const double scale = scale_of(eta);
        const double noise_scale = std::max(1.0, sol.G(t, eta).norm());
        // G carries the error of its backward solves, not just rounding.
        const double noise = std::max(64.0 * kEps, 4.0 * sol.options().solver.tolerance);

        const ConjugacyJacobian J = conjugacy_jacobian(sol, t, eta, {.enforce_bound = false});
        rep.max_deviation = std::max(rep.max_deviation, J.deviation);
        if (J.deviation > J.bound * (1.0 + 1e-12) + 1e-14) ++rep.deviation_violations;

        double sample_fd_error = 0.0;
        for (int j = 1; j <= m; ++j) {
            OrderReport& ord = rep.orders[static_cast<std::size_t>(j - 1)];
            const double h = default_fd_step(j) * scale;
            const Vec d1 = central_difference(G, eta, v, j, h);
            const Vec d2 = central_difference(G, eta, v, j, h / 2);
            const Vec d4 = central_difference(G, eta, v, j, h / 4);
            ++ord.samples;

            const double a = (d1 - d2).norm();
            const double b = (d2 - d4).norm();
            const double floor = noise * noise_scale / std::pow(h / 4, j);
            if (a > floor || b > floor) {
                const double ratio = b > 0.0 ? a / b : std::numeric_limits<double>::infinity();
                ratios[static_cast<std::size_t>(j - 1)].push_back(ratio);
                if (!(ratio >= 2.0 && ratio <= 8.0)) ++ord.richardson_failures;
            } else {
                ratios[static_cast<std::size_t>(j - 1)].push_back(4.0);
            }

            const double delta = 1e-3 * scale;
            if (j == 1) {
                const double err = relative_error(J.jacobian * v, d1);
                sample_fd_error = err;
                ord.max_fd_error = std::max(ord.max_fd_error, err);
                if (err > options.fd_tolerance) ++ord.fd_failures;
                const Mat J2 = conjugacy_jacobian(sol, t, eta + delta * u, {.enforce_bound = false}).jacobian;
                ord.continuity_modulus = std::max(ord.continuity_modulus, (J2 - J.jacobian).norm() / delta);
            } else {
                const Vec shifted = central_difference(G, eta + delta * u, v, j, h);
                ord.continuity_modulus = std::max(ord.continuity_modulus, (shifted - d1).norm() / delta);
            }
        }
        if (options.keep_samples) rep.samples.push_back({t, eta.norm(), sample_fd_error, J.deviation});
    }
    for (int j = 1; j <= m; ++j) {
        OrderReport& ord = rep.orders[static_cast<std::size_t>(j - 1)];
        ord.median_richardson = median(ratios[static_cast<std::size_t>(j - 1)]);
        ord.consistent = ord.richardson_failures == 0 && ord.fd_failures == 0;
    }
    rep.invertibility_margin = 1.0 - rep.max_deviation;

    // Variational equation against forward finite differences and its growth bound.
    for (std::size_t i = 0; i < n; ++i) {
        const Time s = rng.time(t0, t1);
        const Time t = rng.time(s, t1);
        const Vec eta = rng.in_ball(sys.dim, options.sampling.radius);
        const Vec v = rng.unit(sys.dim);
        const Mat X = variational_jacobian(sys, s, t, w, eta);
        const auto phi = [&](const Vec& x) { return general_solution(sys, t, s, w, x); };
        const Vec fd = central_difference(phi, eta, v, 1, 1e-6 * scale_of(eta));
        rep.variational_max_fd_error = std::max(rep.variational_max_fd_error, (X * v - fd).norm() / std::max(1.0, (X * v).norm()));
        const double ratio = operator_norm(X, s, t, w, sys.norms) / variational_bound(sol.growth(), M1, s, t);
        rep.variational_worst_ratio = std::max(rep.variational_worst_ratio, ratio);
        if (ratio > 1.0 + 1e-12) ++rep.variational_violations;
    }

    // Chain rule D₂G(t,H(t,ξ)) · DH(t,ξ) = I with DH from central differences.
    for (std::size_t i = 0; i < n; ++i) {
        const Time t = rng.time(t0, t1);
        const Vec xi = rng.in_ball(sys.dim, options.sampling.radius);
        const double h = default_fd_step(1) * scale_of(xi);
        Mat DH(sys.dim, sys.dim);
        for (int k = 0; k < sys.dim; ++k) {
            Vec e = Vec::Zero(sys.dim);
            e(k) = 1.0;
            DH.col(k) = central_difference([&](const Vec& x) { return sol.H(t, x); }, xi, e, 1, h);
        }
        rep.h_fd_slope = std::max(rep.h_fd_slope, operator_norm(DH, t, t, w, sys.norms));
        const Mat DG = conjugacy_jacobian(sol, t, sol.H(t, xi), {.enforce_bound = false}).jacobian;
        rep.chain_rule_residual =
            std::max(rep.chain_rule_residual, (DG * DH - Mat::Identity(sys.dim, sys.dim)).norm());
    }

    for (const auto& ord : rep.orders) {
        if (ord.fd_failures > 0) {
            std::ostringstream os;
            os << "order " << ord.order << ": analytic and FD derivatives differ at " << ord.fd_failures << " of "
               << ord.samples << " points (max relative error " << ord.max_fd_error << ")";
            rep.failures.push_back(os.str());
        }
        if (ord.richardson_failures > 0) {
            std::ostringstream os;
            os << "order " << ord.order << ": FD Richardson ratio off at " << ord.richardson_failures << " of "
               << ord.samples << " points (median " << ord.median_richardson << ")";
            rep.failures.push_back(os.str());
        }
    }
    if (rep.deviation_violations > 0) {
        std::ostringstream os;
        os << "|D2G - I| exceeds K*M1/(1-alpha) at " << rep.deviation_violations << " points (max "
           << rep.max_deviation << ", bound " << rep.deviation_bound << ")";
        rep.failures.push_back(os.str());
    }
    if (rep.variational_violations > 0) {
        std::ostringstream os;
        os << "variational growth bound violated at " << rep.variational_violations << " points";
        rep.failures.push_back(os.str());
    }
    if (rep.variational_max_fd_error > 1e-5) {
        std::ostringstream os;
        os << "variational Jacobian differs from FD (max " << rep.variational_max_fd_error << ")";
        rep.failures.push_back(os.str());
    }
    if (rep.chain_rule_residual > 1e-4) {
        std::ostringstream os;
        os << "chain rule residual " << rep.chain_rule_residual << " exceeds 1e-4";
        rep.failures.push_back(os.str());
    }
    if (rep.failures.empty()) {
        rep.verdict = "C^" + std::to_string(m) + "-consistent";
    } else {
        rep.verdict = "failed: " + std::to_string(rep.failures.size()) + " check(s)";
    }
    return rep;
}

}  // namespace conjlab
