#pragma once

#include "conjlab/system_core.hpp"

#include <cmath>

namespace fixtures {

using namespace conjlab;

/// Constant matrix A with nonlinearity F.
inline SemilinearSystem make_system(Mat A, Nonlinearity F, Time t_min = 0, Time t_max = 100)
{
    SemilinearSystem sys;
    sys.dim = static_cast<int>(A.rows());
    sys.linear.matrix = [A](Time, const Omega&) { return A; };
    sys.nonlinear = std::move(F);
    sys.norms = NormFamily::euclidean(sys.dim);
    sys.window = TimeWindow(t_min, t_max);
    return sys;
}

inline Mat scalar(double a) { return Mat::Constant(1, 1, a); }

/// F(x) = c sin(x) componentwise.
inline Nonlinearity sine(int dim, double c)
{
    Nonlinearity f;
    f.value = [c](Time, const Omega&, const Vec& x) -> Vec { return c * x.array().sin().matrix(); };
    f.jacobian = [c](Time, const Omega&, const Vec& x) -> Mat { return (c * x.array().cos()).matrix().asDiagonal(); };
    f.smoothness = 1000;
    (void)dim;
    return f;
}

/// F(x) = c x componentwise.
inline Nonlinearity linear_f(double c)
{
    Nonlinearity f;
    f.value = [c](Time, const Omega&, const Vec& x) -> Vec { return c * x; };
    f.smoothness = 1000;
    return f;
}

/// F(x) = c x² componentwise, without derivative oracles.
inline Nonlinearity square(double c)
{
    Nonlinearity f;
    f.value = [c](Time, const Omega&, const Vec& x) -> Vec { return c * x.array().square().matrix(); };
    f.smoothness = 1000;
    return f;
}

inline Nonlinearity constant_f(double c)
{
    Nonlinearity f;
    f.value = [c](Time, const Omega&, const Vec& x) -> Vec { return Vec::Constant(x.size(), c); };
    f.zero_fixed_point = false;
    return f;
}

}  // namespace fixtures
