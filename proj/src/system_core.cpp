#include "conjlab/system_core.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace conjlab {

namespace {

constexpr double kSingularRcond = 1e-13;
constexpr double kEps = std::numeric_limits<double>::epsilon();

void require_finite(const Mat& m, const char* what)
{
    if (!m.allFinite()) throw NumericalFailure(std::string(what) + " produced a non-finite value");
}

double spectral_norm(const Mat& m)
{
    if (m.size() == 1) return std::abs(m(0, 0));
    Eigen::JacobiSVD<Mat> svd(m);
    return svd.singularValues()(0);
}

}  // namespace

// ---------------------------------------------------------------------------
// NormFamily

NormFamily::NormFamily(int dim, bool euclidean, WeightFn weight)
    : dim_(dim), euclidean_(euclidean), weight_(std::move(weight))
{
    if (dim < 1) throw InvalidArgument("state dimension must be at least 1");
}

NormFamily NormFamily::euclidean(int dim)
{
    return NormFamily(dim, true, [dim](Time, const Omega&) { return Mat::Identity(dim, dim); });
}

NormFamily NormFamily::constant(Mat weight)
{
    if (weight.rows() != weight.cols()) throw InvalidArgument("norm weight must be square");
    const int dim = static_cast<int>(weight.rows());
    NormFamily family(dim, false, [weight](Time, const Omega&) { return weight; });
    (void)family.factor(0, {});
    return family;
}

NormFamily NormFamily::from_weights(int dim, WeightFn weight)
{
    return NormFamily(dim, false, std::move(weight));
}

Mat NormFamily::weight(Time t, const Omega& w) const
{
    Mat W = weight_(t, w);
    if (W.rows() != dim_ || W.cols() != dim_) throw InvalidArgument("norm weight has the wrong dimension");
    return W;
}

Mat NormFamily::factor(Time t, const Omega& w) const
{
    if (euclidean_) return Mat::Identity(dim_, dim_);
    const Mat W = weight(t, w);
    require_finite(W, "norm weight");
    const double scale = W.cwiseAbs().maxCoeff();
    if ((W - W.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
        throw InvalidArgument("norm weight is not symmetric");
    }
    Eigen::LLT<Mat> llt(W);
    Mat upper = llt.matrixU();
    if (llt.info() != Eigen::Success || !(upper.diagonal().minCoeff() > 0.0)) {
        std::ostringstream os;
        os << "norm weight at t=" << t << " is not positive definite";
        throw InvalidArgument(os.str());
    }
    return upper;
}

double NormFamily::norm(const Vec& x, Time t, const Omega& w) const
{
    if (euclidean_) return x.norm();
    return (factor(t, w) * x).norm();
}

double NormFamily::ell(Time t, const Omega& w) const
{
    if (euclidean_) return 1.0;
    const Mat R = factor(t, w);
    Eigen::SelfAdjointEigenSolver<Mat> eig(R.transpose() * R);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    return std::max(std::sqrt(hi), 1.0 / std::sqrt(lo));
}

// ---------------------------------------------------------------------------
// Systems

Nonlinearity Nonlinearity::zero(int dim)
{
    Nonlinearity f;
    f.value = [dim](Time, const Omega&, const Vec&) { return Vec::Zero(dim); };
    f.jacobian = [dim](Time, const Omega&, const Vec&) { return Mat::Zero(dim, dim); };
    f.derivative = [dim](Time, const Omega&, const Vec&, std::span<const Vec>) { return Vec::Zero(dim); };
    f.smoothness = std::numeric_limits<int>::max();
    f.zero_fixed_point = true;
    return f;
}

void SemilinearSystem::validate(const Omega& w) const
{
    if (dim < 1) throw InvalidArgument("state dimension must be at least 1");
    if (!linear.matrix) throw InvalidArgument("linear part is missing");
    if (!nonlinear.value) throw InvalidArgument("nonlinearity is missing");
    if (norms.dim() != dim) throw InvalidArgument("norm family dimension differs from the state dimension");
    const Mat A = linear.matrix(window.t_min(), w);
    if (A.rows() != dim || A.cols() != dim) throw InvalidArgument("linear part has the wrong dimension");
    const Vec f0 = nonlinear.value(window.t_min(), w, Vec::Zero(dim));
    if (f0.size() != dim) throw InvalidArgument("nonlinearity has the wrong dimension");
    if (nonlinear.zero_fixed_point && f0.norm() != 0.0) {
        throw InvalidArgument("nonlinearity does not vanish at the origin");
    }
}

Mat step_matrix(const SemilinearSystem& sys, Time t, const Omega& w)
{
    Mat A = sys.linear.matrix(t, w);
    if (A.rows() != sys.dim || A.cols() != sys.dim) throw InvalidArgument("linear part has the wrong dimension");
    require_finite(A, "linear part");
    return A;
}

Mat inverse_step_matrix(const SemilinearSystem& sys, Time t, const Omega& w)
{
    const Mat A = step_matrix(sys, t, w);
    Eigen::PartialPivLU<Mat> lu(A);
    const double rcond = lu.rcond();
    if (!(rcond > kSingularRcond)) throw SingularStep(t, rcond);
    return lu.inverse();
}

Vec nonlinear_term(const SemilinearSystem& sys, Time t, const Omega& w, const Vec& x)
{
    Vec f = sys.nonlinear.value(t, w, x);
    if (f.size() != sys.dim) throw InvalidArgument("nonlinearity has the wrong dimension");
    if (!f.allFinite()) {
        std::ostringstream os;
        os << "nonlinearity is non-finite at t=" << t << ", x=" << x.transpose();
        throw NumericalFailure(os.str());
    }
    return f;
}

Vec step(const SemilinearSystem& sys, Time t, const Omega& w, const Vec& x)
{
    return step_matrix(sys, t, w) * x + nonlinear_term(sys, t, w, x);
}

Mat evolution_operator(const SemilinearSystem& sys, Time t, Time s, const Omega& w)
{
    sys.window.require(t, "evolution_operator");
    sys.window.require(s, "evolution_operator");
    Mat phi = Mat::Identity(sys.dim, sys.dim);
    if (s < t) {
        for (Time k = s; k < t; ++k) phi = step_matrix(sys, k, w) * phi;
    } else if (s > t) {
        for (Time k = s - 1; k >= t; --k) phi = inverse_step_matrix(sys, k, w) * phi;
    }
    return phi;
}

Vec invert_step(const SemilinearSystem& sys, Time t, const Omega& w, const Vec& y, const InvertOptions& options)
{
    const Mat Ainv = inverse_step_matrix(sys, t, w);
    std::optional<double> q;
    if (options.lipschitz) {
        const double product = *options.lipschitz * operator_norm(Ainv, t + 1, t, w, sys.norms);
        if (!(product < 1.0)) throw ContractionViolated("invert_step at t=" + std::to_string(t), product);
        q = product;
    }

    const Vec base = Ainv * y;
    Vec x = base;
    double previous = std::numeric_limits<double>::infinity();
    std::size_t growth_streak = 0;
    for (std::size_t it = 0; it < options.solver.max_iterations; ++it) {
        const Vec next = base - Ainv * nonlinear_term(sys, t, w, x);
        const double delta = (next - x).norm();
        x = next;
        const double estimate = q ? delta * (*q) / (1.0 - *q) : delta;
        if (estimate <= options.solver.tolerance || delta <= 8.0 * kEps * x.norm()) return x;
        if (!q) {
            growth_streak = delta >= previous ? growth_streak + 1 : 0;
            if (growth_streak >= 5) {
                throw ContractionViolated("invert_step at t=" + std::to_string(t), delta / previous);
            }
        }
        previous = delta;
    }
    const double residual = (step(sys, t, w, x) - y).norm();
    throw NotConverged("invert_step at t=" + std::to_string(t), options.solver.max_iterations, q.value_or(NAN),
                       residual);
}

Vec general_solution(const SemilinearSystem& sys, Time t, Time tau, const Omega& w, const Vec& xi,
                     const InvertOptions& options)
{
    sys.window.require(t, "general_solution");
    sys.window.require(tau, "general_solution");
    Vec x = xi;
    if (t >= tau) {
        for (Time k = tau; k < t; ++k) x = step(sys, k, w, x);
    } else {
        for (Time k = tau - 1; k >= t; --k) x = invert_step(sys, k, w, x, options);
    }
    return x;
}

double operator_norm(const Mat& m, Time s, Time t, const Omega& w, const NormFamily& norms)
{
    if (norms.is_euclidean()) return spectral_norm(m);
    const Mat Rs = norms.factor(s, w);
    const Mat Rt = norms.factor(t, w);
    const Mat Rs_inv = Rs.triangularView<Eigen::Upper>().solve(Mat::Identity(Rs.rows(), Rs.cols()));
    return spectral_norm(Rt * m * Rs_inv);
}

Vec variation_of_constants(const SemilinearSystem& sys, Time t, Time tau, const Omega& w, const Vec& xi,
                           const Forcing& forcing)
{
    sys.window.require(t, "variation_of_constants");
    sys.window.require(tau, "variation_of_constants");
    if (t < tau) throw InvalidArgument("variation_of_constants requires t >= tau");
    // Walk i downward so that Φ(t, i+1) is available as a running product.
    Mat transport = Mat::Identity(sys.dim, sys.dim);
    Vec sum = Vec::Zero(sys.dim);
    for (Time i = t - 1; i >= tau; --i) {
        sum += transport * forcing(i, w);
        transport = transport * step_matrix(sys, i, w);
    }
    return transport * xi + sum;
}

double default_fd_step(int order)
{
    if (order <= 1) return 1e-5;
    if (order == 2) return 1e-4;
    return 1e-3;
}

Mat nonlinearity_jacobian(const SemilinearSystem& sys, Time t, const Omega& w, const Vec& x, double fd_step)
{
    if (sys.nonlinear.jacobian) {
        Mat J = sys.nonlinear.jacobian(t, w, x);
        if (J.rows() == sys.dim && J.cols() == sys.dim && J.allFinite()) return J;
    }
    const double h = fd_step * std::max(1.0, x.cwiseAbs().maxCoeff());
    Mat J(sys.dim, sys.dim);
    for (int j = 0; j < sys.dim; ++j) {
        Vec xp = x, xm = x;
        xp(j) += h;
        xm(j) -= h;
        J.col(j) = (nonlinear_term(sys, t, w, xp) - nonlinear_term(sys, t, w, xm)) / (2.0 * h);
    }
    return J;
}

Vec nonlinearity_derivative(const SemilinearSystem& sys, Time t, const Omega& w, const Vec& x,
                            std::span<const Vec> dirs, double fd_step)
{
    if (dirs.empty()) return nonlinear_term(sys, t, w, x);
    if (sys.nonlinear.derivative) {
        Vec d = sys.nonlinear.derivative(t, w, x, dirs);
        if (d.size() == sys.dim && d.allFinite()) return d;
    }
    if (dirs.size() == 1 && sys.nonlinear.jacobian) return nonlinearity_jacobian(sys, t, w, x) * dirs[0];

    const std::size_t order = dirs.size();
    const double h = fd_step * std::max(1.0, x.norm());
    Vec acc = Vec::Zero(sys.dim);
    for (std::size_t mask = 0; mask < (std::size_t{1} << order); ++mask) {
        Vec point = x;
        double sign = 1.0;
        for (std::size_t i = 0; i < order; ++i) {
            const bool minus = (mask >> i) & 1U;
            point += (minus ? -h : h) * dirs[i];
            if (minus) sign = -sign;
        }
        acc += sign * nonlinear_term(sys, t, w, point);
    }
    return acc / std::pow(2.0 * h, static_cast<double>(order));
}

}  // namespace conjlab
