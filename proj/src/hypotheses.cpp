#include "conjlab/hypotheses.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace conjlab {

namespace {

struct Sample {
    Time t;
    Vec x;
    double value;
};

/// Coordinate pattern search that polishes a sampled maximum of `objective`
/// inside the Euclidean ball of the given radius; t stays fixed. Trial points
/// outside the ball are projected back onto its boundary.
double polish_maximum(const std::function<double(Time, const Vec&)>& objective, Sample start, double radius)
{
    double step = radius / 8.0;
    const double min_step = 1e-9 * std::max(radius, 1.0);
    const int dim = static_cast<int>(start.x.size());
    while (step > min_step) {
        bool improved = false;
        for (int i = 0; i < dim; ++i) {
            for (const double sign : {1.0, -1.0}) {
                Vec trial = start.x;
                trial(i) += sign * step;
                if (trial.norm() > radius) trial *= radius / trial.norm();
                const double value = objective(start.t, trial);
                if (value > start.value) {
                    start.x = trial;
                    start.value = value;
                    improved = true;
                }
            }
        }
        if (!improved) step *= 0.5;
    }
    return start.value;
}

double sampled_sup(const std::function<double(Time, const Vec&)>& objective, const SemilinearSystem& sys,
                   const BoundsOptions& options, std::uint64_t stream)
{
    Sampler sampler(options.sampling.seed ^ (0x9e3779b97f4a7c15ULL * stream));
    std::vector<Sample> samples;
    samples.reserve(options.sampling.points + 1);
    samples.push_back({sys.window.t_min(), Vec::Zero(sys.dim), objective(sys.window.t_min(), Vec::Zero(sys.dim))});
    for (std::size_t i = 0; i < options.sampling.points; ++i) {
        const Time t = sampler.time(sys.window.t_min(), sys.window.t_max());
        Vec x = sampler.in_ball(sys.dim, options.sampling.radius);
        const double value = objective(t, x);
        samples.push_back({t, std::move(x), value});
    }
    const std::size_t top = std::min(options.refine_top, samples.size());
    std::partial_sort(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(top), samples.end(),
                      [](const Sample& a, const Sample& b) { return a.value > b.value; });
    double best = samples.front().value;
    for (std::size_t i = 0; i < top; ++i) {
        best = std::max(best, polish_maximum(objective, samples[i], options.sampling.radius));
    }
    return best;
}

}  // namespace

GrowthCertificate certify_bounded_growth(const SemilinearSystem& sys, const Omega& w)
{
    const TimeWindow& win = sys.window;
    const std::size_t n_times = win.size();
    if (n_times < 2) throw InvalidArgument("bounded growth needs a window with at least two times");

    // norms[s][n] = ‖Φ(s+n, s)‖_{s,s+n}
    std::vector<std::vector<double>> norms(n_times);
    std::vector<double> decay(n_times, 0.0);
    for (Time s = win.t_min(); s <= win.t_max(); ++s) {
        auto& row = norms[win.index(s)];
        Mat phi = Mat::Identity(sys.dim, sys.dim);
        row.push_back(1.0);
        for (Time t = s + 1; t <= win.t_max(); ++t) {
            phi = step_matrix(sys, t - 1, w) * phi;
            row.push_back(operator_norm(phi, s, t, w, sys.norms));
        }
        for (std::size_t n = 0; n < row.size(); ++n) decay[n] = std::max(decay[n], row[n]);
    }

    // Least squares fit of log decay[n] = c + n log α over n ≥ 1.
    double slope;
    const std::size_t count = n_times - 1;
    if (count == 1) {
        slope = std::log(decay[1]);
    } else {
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        for (std::size_t n = 1; n < n_times; ++n) {
            const double x = static_cast<double>(n);
            const double y = std::log(decay[n]);
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        const double c = static_cast<double>(count);
        slope = (c * sxy - sx * sy) / (c * sxx - sx * sx);
    }
    const double alpha = std::exp(slope);
    if (!(alpha < 1.0) || !std::isfinite(alpha)) {
        throw CertificateError("no contractive growth certificate on window (fitted rate " + std::to_string(alpha) +
                               ")");
    }

    GrowthCertificate cert;
    cert.alpha = alpha;
    cert.t_min = win.t_min();
    cert.t_max = win.t_max();
    double K = 1.0;
    for (const auto& row : norms) {
        for (std::size_t n = 0; n < row.size(); ++n) K = std::max(K, row[n] / std::pow(alpha, static_cast<double>(n)));
    }
    cert.K = K;
    double residual = -std::numeric_limits<double>::infinity();
    for (const auto& row : norms) {
        for (std::size_t n = 0; n < row.size(); ++n) {
            residual = std::max(residual, row[n] - K * std::pow(alpha, static_cast<double>(n)));
        }
    }
    cert.residual = residual;
    cert.decay = std::move(decay);
    return cert;
}

double NonlinearityBounds::derivative_bound(std::size_t order) const
{
    if (order >= Mj.size()) throw InvalidArgument("derivative bound of order " + std::to_string(order) + " missing");
    return Mj[order];
}

NonlinearityBounds estimate_nonlinearity_bounds(const SemilinearSystem& sys, const Omega& w,
                                                const BoundsOptions& options)
{
    if (options.order < 0) throw InvalidArgument("derivative order must be non-negative");
    NonlinearityBounds bounds;
    bounds.sampling = options.sampling;
    bounds.safety_factor = options.safety_factor;

    const auto value_norm = [&](Time t, const Vec& x) {
        return sys.norms.norm(nonlinear_term(sys, t, w, x), t + 1, w);
    };
    bounds.M = sampled_sup(value_norm, sys, options, 1);

    // Difference quotients: half independent pairs, half nearby pairs at
    // log-uniform separations.
    Sampler sampler(options.sampling.seed ^ 0x5851f42d4c957f2dULL);
    const double radius = options.sampling.radius;
    double quotient = 0.0;
    for (std::size_t i = 0; i < options.sampling.pairs; ++i) {
        const Time t = sampler.time(sys.window.t_min(), sys.window.t_max());
        const Vec x = sampler.in_ball(sys.dim, radius);
        Vec y;
        if (i % 2 == 0) {
            y = sampler.in_ball(sys.dim, radius);
        } else {
            const double sep = radius * std::pow(10.0, -sampler.uniform(0.0, 6.0));
            y = x + sep * sampler.unit(sys.dim);
            if (y.norm() > radius) y *= radius / y.norm();
        }
        const double dx = sys.norms.norm(x - y, t, w);
        if (dx == 0.0) continue;
        const double df = sys.norms.norm(nonlinear_term(sys, t, w, x) - nonlinear_term(sys, t, w, y), t + 1, w);
        quotient = std::max(quotient, df / dx);
    }
    bounds.L = options.safety_factor * quotient;

    const std::size_t top_order = static_cast<std::size_t>(std::max(options.order, 1));
    bounds.Mj.assign(top_order + 1, 0.0);
    bounds.Mj[0] = bounds.M;
    const auto jacobian_norm = [&](Time t, const Vec& x) {
        return operator_norm(nonlinearity_jacobian(sys, t, w, x, default_fd_step(1)), t, t + 1, w, sys.norms);
    };
    bounds.Mj[1] = sampled_sup(jacobian_norm, sys, options, 2);

    for (std::size_t j = 2; j <= top_order; ++j) {
        Sampler dir_sampler(options.sampling.seed ^ (0x2545f4914f6cdd1dULL * j));
        double best = 0.0;
        for (std::size_t i = 0; i < options.sampling.points; ++i) {
            const Time t = dir_sampler.time(sys.window.t_min(), sys.window.t_max());
            const Vec x = dir_sampler.in_ball(sys.dim, radius);
            const Mat R = sys.norms.factor(t, w);
            for (int rep = 0; rep < 3; ++rep) {
                std::vector<Vec> dirs;
                for (std::size_t k = 0; k < j; ++k) {
                    dirs.push_back(R.triangularView<Eigen::Upper>().solve(dir_sampler.unit(sys.dim)));
                }
                const Vec d = nonlinearity_derivative(sys, t, w, x, dirs, default_fd_step(static_cast<int>(j)));
                best = std::max(best, sys.norms.norm(d, t + 1, w));
            }
        }
        bounds.Mj[j] = best;
    }
    return bounds;
}

ConditionReport check_conditions(const GrowthCertificate& growth, const NonlinearityBounds& bounds,
                                 double max_inverse_norm)
{
    const auto make = [](std::string name, double measured, double threshold) {
        ConditionCheck c;
        c.name = std::move(name);
        c.measured = measured;
        c.threshold = threshold;
        c.margin = threshold - measured;
        c.pass = measured < threshold;
        return c;
    };
    const double gap = 1.0 - growth.alpha;
    ConditionReport report;
    report.topological = make("K*L < 1-alpha", growth.K * bounds.L, gap);
    report.smooth = make("M1*K < 1-alpha", bounds.derivative_bound(1) * growth.K, gap);
    report.invertibility = make("L*max|A^-1| < 1", bounds.L * max_inverse_norm, 1.0);
    return report;
}

double max_inverse_step_norm(const SemilinearSystem& sys, const Omega& w)
{
    double best = 0.0;
    for (Time t = sys.window.t_min(); t < sys.window.t_max(); ++t) {
        best = std::max(best, operator_norm(inverse_step_matrix(sys, t, w), t + 1, t, w, sys.norms));
    }
    return best;
}

std::vector<double> gronwall_bound(std::span<const double> c, double b)
{
    if (b < 0.0) throw InvalidArgument("Gronwall constant b must be non-negative");
    if (std::any_of(c.begin(), c.end(), [](double v) { return !(v >= 0.0); })) {
        throw InvalidArgument("Gronwall sequence c must be non-negative");
    }
    std::vector<double> bound(c.size());
    if (c.empty()) return bound;
    // bound(k) = (1+b) bound(k−1) + (c(k) − c(k−1)), bound(κ) = c(κ)
    bound[0] = c[0];
    for (std::size_t k = 1; k < c.size(); ++k) bound[k] = (1.0 + b) * bound[k - 1] + (c[k] - c[k - 1]);
    return bound;
}

GronwallCheck check_gronwall(std::span<const double> a, std::span<const double> c, double b)
{
    if (a.size() != c.size()) throw InvalidArgument("Gronwall sequences differ in length");
    const std::vector<double> bound = gronwall_bound(c, b);
    GronwallCheck check;
    check.worst_excess = -std::numeric_limits<double>::infinity();
    double partial = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double scale = std::max({1.0, std::abs(c[k]), std::abs(bound[k])});
        if (a[k] > c[k] + b * partial + 1e-12 * scale) check.premise_holds = false;
        const double excess = a[k] - bound[k];
        if (excess > check.worst_excess) {
            check.worst_excess = excess;
            check.worst_index = k;
        }
        if (excess > 1e-12 * scale) check.bound_holds = false;
        partial += a[k];
    }
    if (a.empty()) check.worst_excess = 0.0;
    return check;
}

}  // namespace conjlab
