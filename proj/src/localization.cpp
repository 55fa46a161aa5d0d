#include "conjlab/localization.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace conjlab {

namespace {

double glue(double s)
{
    return s > 0.0 ? std::exp(-1.0 / s) : 0.0;
}

Mat upper_factor(const Mat& weight)
{
    Eigen::LLT<Mat> llt(weight);
    if (llt.info() != Eigen::Success) throw InvalidArgument("state norm weight is not positive definite");
    return llt.matrixU();
}

/// Maps a point of the Euclidean ball to the weighted ball: |R⁻¹z|_W = ‖z‖.
Vec from_unit(const Mat& R, const Vec& z)
{
    return R.triangularView<Eigen::Upper>().solve(z);
}

/// Lipschitz estimate of f on the weighted ball {|x|_from ≤ radius}, from
/// |·|_from to |·|_to: sampled difference quotients plus FD Jacobian norms,
/// with the largest Jacobian norm polished by a pattern search.
double lipschitz_on_ball(const std::function<Vec(const Vec&)>& f, const Mat& R_from, const Mat& R_to, double radius,
                         std::size_t pairs, std::size_t jacobian_points, std::uint64_t seed)
{
    const int d = static_cast<int>(R_from.rows());
    Sampler sampler(seed);
    double best = 0.0;
    for (std::size_t i = 0; i < pairs; ++i) {
        const Vec zx = sampler.in_ball(d, radius);
        Vec zy;
        if (i % 2 == 0) {
            zy = sampler.in_ball(d, radius);
        } else {
            zy = zx + radius * std::pow(10.0, -sampler.uniform(0.0, 6.0)) * sampler.unit(d);
            if (zy.norm() > radius) zy *= radius / zy.norm();
        }
        const double dz = (zx - zy).norm();
        if (dz == 0.0) continue;
        best = std::max(best, (R_to * (f(from_unit(R_from, zx)) - f(from_unit(R_from, zy)))).norm() / dz);
    }

    const double h = 1e-6 * radius;
    const auto jac_norm = [&](const Vec& z) {
        Mat J(d, d);
        for (int j = 0; j < d; ++j) {
            Vec zp = z, zm = z;
            zp(j) += h;
            zm(j) -= h;
            J.col(j) = R_to * (f(from_unit(R_from, zp)) - f(from_unit(R_from, zm))) / (2.0 * h);
        }
        return Eigen::JacobiSVD<Mat>(J).singularValues()(0);
    };
    Vec arg = Vec::Zero(d);
    double top = -1.0;
    for (std::size_t i = 0; i < jacobian_points; ++i) {
        const Vec z = sampler.in_ball(d, radius * (1.0 - 1e-6));
        const double v = jac_norm(z);
        if (v > top) {
            top = v;
            arg = z;
        }
    }
    for (double step = radius / 16.0; step > 1e-7 * radius;) {
        bool improved = false;
        for (int i = 0; i < d; ++i) {
            for (const double sign : {1.0, -1.0}) {
                Vec trial = arg;
                trial(i) += sign * step;
                if (trial.norm() > radius * (1.0 - 1e-6)) continue;
                const double v = jac_norm(trial);
                if (v > top) {
                    top = v;
                    arg = trial;
                    improved = true;
                }
            }
        }
        if (!improved) step *= 0.5;
    }
    return std::max(best, top);
}

double sup_on_ball(const std::function<Vec(const Vec&)>& f, const Mat& R_from, const Mat& R_to, double radius,
                   std::size_t points, std::uint64_t seed)
{
    const int d = static_cast<int>(R_from.rows());
    Sampler sampler(seed);
    double best = 0.0;
    for (std::size_t i = 0; i < points; ++i) {
        best = std::max(best, (R_to * f(from_unit(R_from, sampler.in_ball(d, radius)))).norm());
    }
    return best;
}

}  // namespace

double bump(double r)
{
    if (r <= 1.0) return 1.0;
    if (r >= 2.0) return 0.0;
    const double a = glue(2.0 - r);
    const double b = glue(r - 1.0);
    return a / (a + b);
}

StateWeight euclidean_weight(int dim)
{
    return [dim](const Omega&) -> Mat { return Mat::Identity(dim, dim); };
}

StateWeight random_norm_weight(std::shared_ptr<const RandomNorm> norm)
{
    return [norm](const Omega& w) -> Mat {
        if (w.path != norm->omega().path) throw InvalidArgument("random norm weight evaluated on a different path");
        return norm->weight(w.shift - norm->omega().shift);
    };
}

// ---------------------------------------------------------------- CutoffSystem

CutoffSystem::CutoffSystem(RandomSystem original, StateWeight weight, double target_L, std::map<Omega, double> table)
    : original_(std::move(original)), weight_(std::move(weight)), target_L_(target_L), table_(std::move(table))
{
    if (table_.empty()) throw InvalidArgument("cutoff needs at least one sampled radius");
    fallback_ = std::numeric_limits<double>::infinity();
    for (const auto& [w, s] : table_) {
        if (!(s > 0.0)) throw InvalidArgument("cutoff radii must be positive");
        fallback_ = std::min(fallback_, s);
    }
}

double CutoffSystem::sigma(const Omega& w) const
{
    const auto it = table_.find(w);
    return it == table_.end() ? fallback_ : it->second;
}

double CutoffSystem::norm(const Omega& w, const Vec& x) const
{
    return std::sqrt(std::max(0.0, x.dot(weight_(w) * x)));
}

Vec CutoffSystem::f_tilde(const Omega& w, const Vec& x) const
{
    if (!original_.nonlinear) return Vec::Zero(x.size());
    const Vec f = original_.nonlinear(*original_.linear.mds, w, x);
    return bump(norm(w, x) / sigma(w)) * f;
}

RandomSystem CutoffSystem::truncated() const
{
    RandomSystem out;
    out.linear = original_.linear;
    auto self = std::make_shared<const CutoffSystem>(*this);
    out.nonlinear = [self](const ShiftMDS&, const Omega& w, const Vec& x) { return self->f_tilde(w, x); };
    return out;
}

// ---------------------------------------------------------------- construction

VanishingCheck vanishing_quotient(const RandomSystem& rds, const StateWeight& weight, const Omega& w,
                                  const CutoffOptions& options)
{
    const Mat R = upper_factor(weight(w));
    const Mat Rn = upper_factor(weight(w.shifted(1)));
    const auto f = [&](const Vec& x) { return rds.nonlinear(*rds.linear.mds, w, x); };
    VanishingCheck check;
    check.outer = lipschitz_on_ball(f, R, Rn, std::ldexp(1.0, -1), options.pairs, options.jacobian_points, options.seed);
    check.inner =
        lipschitz_on_ball(f, R, Rn, std::ldexp(1.0, -20), options.pairs, options.jacobian_points, options.seed + 1);
    check.vanishes = check.inner <= options.vanishing_ratio * check.outer || check.inner < 1e-12;
    return check;
}

CutoffSystem cutoff_nonlinearity(const RandomSystem& rds, const std::vector<Omega>& samples, StateWeight weight,
                                 const CutoffOptions& options)
{
    if (samples.empty()) throw InvalidArgument("cutoff needs at least one sample point");
    if (!(options.target_L > 0.0)) throw InvalidArgument("target Lipschitz constant must be positive");
    const int d = rds.linear.dim;
    std::map<Omega, double> table;
    if (!rds.nonlinear) {
        for (const auto& w : samples) table[w] = std::ldexp(1.0, options.k_max);
        return CutoffSystem(rds, std::move(weight), options.target_L, std::move(table));
    }

    for (const auto& w : samples) {
        const Vec f0 = rds.nonlinear(*rds.linear.mds, w, Vec::Zero(d));
        if (f0.norm() != 0.0) throw InvalidArgument("cutoff needs F(omega, 0) = 0");
        const VanishingCheck vq = vanishing_quotient(rds, weight, w, options);
        if (!vq.vanishes) {
            throw InvalidArgument("difference quotient of F does not vanish at the origin: Lip on radius 2^-20 is " +
                                  std::to_string(vq.inner) + " against " + std::to_string(vq.outer) +
                                  " on radius 2^-1");
        }

        const Mat R = upper_factor(weight(w));
        const Mat Rn = upper_factor(weight(w.shifted(1)));
        const auto truncated = [&](double sigma) {
            return [&, sigma](const Vec& x) -> Vec {
                const double r = std::sqrt(std::max(0.0, x.dot(R.transpose() * (R * x))));
                return bump(r / sigma) * rds.nonlinear(*rds.linear.mds, w, x);
            };
        };
        const auto lip = [&](double sigma) {
            return lipschitz_on_ball(truncated(sigma), R, Rn, 2.0 * sigma, options.pairs, options.jacobian_points,
                                     options.seed ^ static_cast<std::uint64_t>(w.shift));
        };

        double sigma = 0.0;
        for (int k = options.k_max; k >= options.k_min; --k) {
            const double candidate = std::ldexp(1.0, k);
            if (options.safety * lip(candidate) <= options.target_L) {
                sigma = candidate;
                break;
            }
        }
        if (sigma == 0.0) {
            throw InvalidArgument("no cutoff radius down to 2^" + std::to_string(options.k_min) +
                                  " meets the target Lipschitz constant");
        }
        while (sup_on_ball(truncated(sigma), R, Rn, 2.0 * sigma, options.pairs, options.seed + 7) > 1.0 ||
               options.safety * lip(sigma) > options.target_L) {
            sigma *= 0.5;
            if (sigma < std::ldexp(1.0, options.k_min)) throw InvalidArgument("cutoff radius underflow");
        }
        table[w] = sigma;
    }
    return CutoffSystem(rds, std::move(weight), options.target_L, std::move(table));
}

CutoffCheck verify_cutoff(const CutoffSystem& cut, const Omega& w, std::size_t pairs, std::uint64_t seed)
{
    const int d = cut.original().linear.dim;
    const double sigma = cut.sigma(w);
    const Mat R = upper_factor(cut.weight(w));
    const Mat Rn = upper_factor(cut.weight(w.shifted(1)));
    Sampler sampler(seed);
    CutoffCheck check;
    const auto in_shell = [&](double lo, double hi) {
        return from_unit(R, sampler.uniform(lo, hi) * sampler.unit(d));
    };
    const auto record = [&](const Vec& x, const Vec& fx) {
        check.sup = std::max(check.sup, (Rn * fx).norm());
        if (cut.inside(w, x)) {
            ++check.inside_points;
            const Vec f = cut.original().nonlinear(*cut.original().linear.mds, w, x);
            if (!(f.array() == fx.array()).all()) check.agrees_inside = false;
        }
    };
    for (std::size_t i = 0; i < pairs; ++i) {
        Vec x, y;
        switch (i % 4) {
        case 0:
            x = from_unit(R, sampler.in_ball(d, 2.2 * sigma));
            y = from_unit(R, sampler.in_ball(d, 2.2 * sigma));
            break;
        case 1:
            x = from_unit(R, sampler.in_ball(d, sigma));
            y = in_shell(sigma, 2.0 * sigma);
            break;
        case 2:
            x = from_unit(R, sampler.in_ball(d, 2.0 * sigma));
            y = x + from_unit(R, sigma * std::pow(10.0, -sampler.uniform(0.0, 6.0)) * sampler.unit(d));
            break;
        default:
            x = from_unit(R, sampler.in_ball(d, 2.0 * sigma));
            y = in_shell(2.0 * sigma, 4.0 * sigma);
            break;
        }
        const Vec fx = cut.f_tilde(w, x);
        const Vec fy = cut.f_tilde(w, y);
        record(x, fx);
        record(y, fy);
        const double dx = (R * (x - y)).norm();
        if (dx == 0.0) continue;
        check.lipschitz = std::max(check.lipschitz, (Rn * (fx - fy)).norm() / dx);
        ++check.pairs;
    }
    return check;
}

EscapeTime escape_time(const RandomSystem& psi, const CutoffSystem& cut, const Omega& w, const Vec& x, Time cap)
{
    EscapeTime out;
    Vec y = x;
    for (Time tau = 0;; ++tau) {
        if (!cut.inside(w.shifted(tau), y)) return out;
        out.last_inside = tau;
        if (tau == cap) {
            out.reached_cap = true;
            return out;
        }
        y = psi.psi(1, w.shifted(tau), y);
    }
}

LocalReport local_linearize(const CutoffSystem& cut, const SpectrumReport& spectrum, const Omega& w,
                            const TimeWindow& window, const LocalOptions& options)
{
    LocalReport report;
    report.tolerance = options.tolerance;
    RdsOptions rds_options = options.rds;
    if (options.mode == LocalMode::smooth) {
        rds_options.smooth = true;
        rds_options.smooth_options.sampling.radius = cut.fallback();
    }
    // f̃ vanishes outside |x|_ω ≤ 2σ(ω); bounds are sampled on the Euclidean ball holding that region
    // when it is smaller than the configured one.
    double reach = 0.0;
    for (Time t = window.t_min(); t <= window.t_max(); ++t) {
        const Omega wt = w.shifted(t);
        const double mu_min = Eigen::SelfAdjointEigenSolver<Mat>(cut.weight(wt)).eigenvalues()(0);
        reach = std::max(reach, 2.0 * cut.sigma(wt) / std::sqrt(mu_min));
    }
    rds_options.bounds.sampling.radius = std::min(rds_options.bounds.sampling.radius, 1.1 * reach);
    const RandomSystem& psi = cut.original();
    const RandomSystem tilde = cut.truncated();
    report.global = rds_linearize(tilde, spectrum, w, window, rds_options);
    const ConjugacySolution& sol = *report.global.solution;

    const Time s0 = window.t_min();
    const Omega start = w.shifted(s0);
    const Time cap = window.t_max() - s0;
    const Mat R = upper_factor(cut.weight(start));
    // Starts are drawn from U(ω) intersected with the verification ball.
    const double mu_min = Eigen::SelfAdjointEigenSolver<Mat>(cut.weight(start)).eigenvalues().minCoeff();
    const double start_radius = std::min(cut.sigma(start), rds_options.verify.sampling.radius * std::sqrt(mu_min));
    Sampler sampler(options.seed);
    for (std::size_t k = 0; k < options.orbits; ++k) {
        const Vec x = from_unit(R, sampler.in_ball(psi.linear.dim, start_radius));
        LocalOrbit orbit;
        orbit.start_norm = cut.norm(start, x);
        const EscapeTime e = escape_time(psi, cut, start, x, cap);
        orbit.escape = e.last_inside;
        orbit.reached_cap = e.reached_cap;

        const Vec xi = sol.G(s0, x);
        Vec y = x, y_tilde = x;
        Mat phi = Mat::Identity(psi.linear.dim, psi.linear.dim);
        for (Time tau = 0; tau <= cap; ++tau) {
            if (tau > 0) {
                const Omega prev = start.shifted(tau - 1);
                y = psi.psi(1, prev, y);
                y_tilde = tilde.psi(1, prev, y_tilde);
                phi = psi.linear.A(prev) * phi;
            }
            const double residual = (sol.H(s0 + tau, phi * xi) - y).norm();
            if (tau <= orbit.escape) {
                orbit.residual = std::max(orbit.residual, residual);
                if (!(y.array() == y_tilde.array()).all()) orbit.identical = false;
                ++report.compared_steps;
            } else {
                orbit.residual_after = std::max(orbit.residual_after, residual);
            }
        }
        report.max_residual = std::max(report.max_residual, orbit.residual);
        report.max_residual_after = std::max(report.max_residual_after, orbit.residual_after);
        report.identical = report.identical && orbit.identical;
        report.orbits.push_back(orbit);
    }
    return report;
}

}  // namespace conjlab
