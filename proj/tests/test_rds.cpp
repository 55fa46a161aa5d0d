#include "conjlab/rds.hpp"
#include "fixtures.hpp"

#include <doctest.h>

#include <cmath>

using namespace conjlab;

namespace {

std::shared_ptr<const ShiftMDS> coin(std::uint64_t seed)
{
    return std::make_shared<const ShiftMDS>(ShiftMDS::bernoulli({0.5, 0.5}, seed));
}

Cocycle constant_cocycle(Mat A)
{
    Cocycle c;
    c.dim = static_cast<int>(A.rows());
    c.mds = coin(1);
    c.generator = [A](const ShiftMDS&, const Omega&) { return A; };
    return c;
}

Cocycle switching_cocycle(std::vector<Mat> mats, std::uint64_t seed)
{
    Cocycle c;
    c.dim = static_cast<int>(mats.front().rows());
    c.mds = coin(seed);
    c.generator = [mats](const ShiftMDS& m, const Omega& w) { return mats[m.symbol(w)]; };
    return c;
}

Cocycle scalar_coin(double a0, double a1, std::uint64_t seed)
{
    return switching_cocycle({fixtures::scalar(a0), fixtures::scalar(a1)}, seed);
}

Cocycle triangular()
{
    Mat t0(2, 2), t1(2, 2);
    t0 << 0.9, 0.5, 0.0, 0.3;
    t1 << 0.4, -0.7, 0.0, 0.6;
    return switching_cocycle({t0, t1}, 11);
}

}  // namespace

TEST_CASE("Bernoulli base is deterministic and obeys the shift group law")
{
    const ShiftMDS a = ShiftMDS::bernoulli({0.5, 0.5}, 42);
    const ShiftMDS b = ShiftMDS::bernoulli({0.5, 0.5}, 42);
    CHECK(a.window(3, -20, 50) == b.window(3, -20, 50));
    CHECK(a.window(3, 0, 50) != a.window(4, 0, 50));

    const Omega w{7, 5};
    CHECK(ShiftMDS::theta(ShiftMDS::theta(w, 2), -2) == w);
    CHECK(ShiftMDS::theta(w, 0) == w);
    CHECK(ShiftMDS::theta(ShiftMDS::theta(w, 3), 4) == ShiftMDS::theta(w, 7));
    CHECK(a.symbol(ShiftMDS::theta(w, 3)) == a.window(7, 8, 1)[0]);
}

TEST_CASE("Bernoulli symbol frequency matches the probability")
{
    const ShiftMDS mds = ShiftMDS::bernoulli({0.5, 0.5}, 42);
    std::size_t zeros = 0;
    for (Time k = 0; k < 100000; ++k) zeros += mds.symbol({0, k}) == 0 ? 1 : 0;
    const double freq = static_cast<double>(zeros) / 1e5;
    CHECK(freq == doctest::Approx(0.50039).epsilon(1e-12));
    CHECK(std::abs(freq - 0.5) <= 0.005);

    const ShiftMDS skew = ShiftMDS::bernoulli({0.2, 0.3, 0.5}, 5);
    std::vector<std::size_t> counts(3, 0);
    for (Time k = 0; k < 100000; ++k) ++counts[skew.symbol({1, k})];
    const std::vector<double> p{0.2, 0.3, 0.5};
    for (std::size_t s = 0; s < 3; ++s) {
        const double sigma = std::sqrt(p[s] * (1 - p[s]) / 1e5);
        CHECK(std::abs(static_cast<double>(counts[s]) / 1e5 - p[s]) <= 3 * sigma);
    }
}

TEST_CASE("rotation phases advance by the angle")
{
    const ShiftMDS rot = ShiftMDS::rotation(std::sqrt(2.0), 3);
    const double step = std::sqrt(2.0) / (2 * M_PI);
    const double x0 = rot.phase({2, 0});
    for (Time n : {-7, 1, 13}) {
        const double expect = x0 + n * step - std::floor(x0 + n * step);
        CHECK(rot.phase({2, n}) == doctest::Approx(expect).epsilon(1e-12));
    }
    CHECK_THROWS_AS(ShiftMDS::rotation(M_PI, 1), InvalidArgument);
}

TEST_CASE("invalid base parameters are rejected")
{
    CHECK_THROWS_AS(ShiftMDS::bernoulli({0.5, 0.6}, 1), InvalidArgument);
    CHECK_THROWS_AS(ShiftMDS::bernoulli({-0.1, 1.1}, 1), InvalidArgument);
    CHECK_THROWS_AS(ShiftMDS::bernoulli({}, 1), InvalidArgument);
    CHECK_THROWS_AS((void)ShiftMDS::bernoulli({0.5, 0.5}, 1).phase({0, 0}), InvalidArgument);
}

TEST_CASE("cocycle products")
{
    Mat A(2, 2);
    A << 0.5, 0.3, -0.2, 0.8;
    const Cocycle c = constant_cocycle(A);
    CHECK((cocycle_products(c, 0, {0, 0}) - Mat::Identity(2, 2)).norm() == 0.0);
    CHECK((cocycle_products(c, 4, {0, 0}) - A * A * A * A).norm() < 1e-15);
    CHECK((cocycle_products(c, -2, {0, 0}) - (A * A).inverse()).norm() < 1e-12);

    const Cocycle r = triangular();
    for (std::uint64_t path = 0; path < 5; ++path) {
        const Omega w{path, 3};
        const Mat direct = cocycle_products(r, 5, w);
        const Mat split = cocycle_products(r, 3, w.shifted(2)) * cocycle_products(r, 2, w);
        CHECK((direct - split).norm() <= 1e-12 * std::max(1.0, direct.norm()));
        for (Time n : {-4, 2, 6}) {
            for (Time m : {-3, 0, 5}) {
                const Mat lhs = cocycle_products(r, n + m, w);
                const Mat rhs = cocycle_products(r, m, w.shifted(n)) * cocycle_products(r, n, w);
                CHECK((lhs - rhs).norm() <= 1e-12 * std::max(1.0, lhs.norm()) * std::pow(4.0, std::abs(n)));
            }
        }
    }

    const Cocycle singular = constant_cocycle(Mat::Zero(2, 2));
    CHECK_THROWS_AS((void)cocycle_products(singular, -1, {0, 0}), SingularStep);
}

TEST_CASE("integrability means are finite")
{
    const IntegrabilityReport rep = check_integrability(scalar_coin(2.0, 0.125, 3), 4, 200);
    CHECK(rep.finite);
    CHECK(rep.mean_log_plus_A > 0.0);
    CHECK(rep.mean_log_plus_A < std::log(2.0));
    CHECK(rep.mean_log_plus_A_inv < std::log(8.0));
}

TEST_CASE("constant diagonal spectrum is exact")
{
    Mat A = Mat::Zero(2, 2);
    A.diagonal() << 0.5, 0.25;
    const SpectrumReport rep = lyapunov_spectrum(constant_cocycle(A));
    REQUIRE(rep.lambdas.size() == 2);
    CHECK(std::abs(rep.lambdas[0] - std::log(0.5)) <= 1e-10);
    CHECK(std::abs(rep.lambdas[1] - std::log(0.25)) <= 1e-10);
    CHECK(rep.multiplicities == std::vector<int>{1, 1});
    CHECK(rep.gap_parameter == doctest::Approx(std::log(2.0) / 2));
    CHECK(rep.all_negative());
    CHECK(std::abs(std::abs(rep.splitting[0](0, 0)) - 1.0) < 1e-12);
    CHECK(std::abs(std::abs(rep.splitting[1](1, 0)) - 1.0) < 1e-12);

    Mat B = Mat::Zero(2, 2);
    B.diagonal() << 0.25, 0.5;
    const SpectrumReport swapped = lyapunov_spectrum(constant_cocycle(B));
    CHECK(std::abs(swapped.lambdas[0] - std::log(0.5)) <= 1e-10);
    CHECK(std::abs(std::abs(swapped.splitting[0](1, 0)) - 1.0) < 1e-10);
}

TEST_CASE("repeated exponents form one cluster")
{
    Mat A(3, 3);
    A << 0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.2;
    const SpectrumReport rep = lyapunov_spectrum(constant_cocycle(A), {.n_steps = 2000});
    CHECK(rep.multiplicities == std::vector<int>{2, 1});
    CHECK(rep.splitting[0].cols() == 2);
    CHECK(rep.dim() == 3);
    CHECK(rep.cumulative(1) == 2);
}

TEST_CASE("i.i.d. scalar spectrum recovers -ln 2")
{
    const SpectrumReport rep = lyapunov_spectrum(scalar_coin(2.0, 0.125, 9));
    REQUIRE(rep.lambdas.size() == 1);
    CHECK(std::abs(rep.lambdas[0] + std::log(2.0)) <= std::max(0.01, rep.half_widths[0]));
    CHECK(rep.half_widths[0] < 0.01);
    CHECK(rep.trace.size() == rep.n_steps / rep.trace_every);
}

TEST_CASE("triangular cocycle matches the product singular value oracle")
{
    const SpectrumReport rep = lyapunov_spectrum(triangular());
    REQUIRE(rep.lambdas.size() == 2);
    CHECK(std::abs(rep.lambdas[0] - -0.51127786672761877) <= rep.half_widths[0]);
    CHECK(std::abs(rep.lambdas[1] - -0.85702868306532187) <= rep.half_widths[1]);
}

TEST_CASE("spectrum refusals")
{
    SpectrumOptions opt;
    opt.require_negative = true;
    opt.n_steps = 500;
    CHECK_THROWS_AS((void)lyapunov_spectrum(constant_cocycle(fixtures::scalar(1.5)), opt), CertificateError);

    // A rotation-driven scalar with a slow oscillation cannot settle in 20 steps.
    Cocycle slow;
    slow.dim = 1;
    slow.mds = std::make_shared<const ShiftMDS>(ShiftMDS::rotation(0.01, 2));
    slow.generator = [](const ShiftMDS& m, const Omega& w) {
        return fixtures::scalar(std::exp(3.0 * std::cos(2 * M_PI * m.phase(w))));
    };
    SpectrumOptions short_run;
    short_run.n_steps = 20;
    short_run.n_samples = 1;
    short_run.transient_allowance = 0.0;
    CHECK_THROWS_AS((void)lyapunov_spectrum(slow, short_run), NotConverged);
}

TEST_CASE("Oseledets frame is invariant under the cocycle")
{
    const Cocycle c = triangular();
    const SpectrumReport rep = lyapunov_spectrum(c, {.n_steps = 4000, .n_samples = 16});
    const OseledetsFrame frame(c, rep, {3, 0}, -10, 30, 400);
    CHECK(frame.invariance_defect() < 1e-10);
    for (Time p = -10; p < 30; ++p) {
        // e₁ is invariant for upper triangular steps and carries the top exponent.
        CHECK(std::abs(std::abs(frame.block(0, p)(0, 0)) - 1.0) < 1e-10);
        const Mat image = c.A({3, p}) * frame.block(1, p);
        const Mat back = frame.block(1, p + 1) * frame.restricted_step(1, p);
        CHECK((image - back).norm() < 1e-10);
    }
}

TEST_CASE("adapted norm of a constant scalar matches the geometric series")
{
    const Cocycle c = constant_cocycle(fixtures::scalar(0.5));
    const SpectrumReport rep = lyapunov_spectrum(c, {.n_steps = 1000, .n_samples = 1});
    RandomNormOptions one;
    one.two_sided = false;
    const RandomNorm n1 = adapted_random_norm(c, rep, {0, 0}, 0, 10, one);
    const RandomNorm n2 = adapted_random_norm(c, rep, {0, 0}, 0, 10);
    for (Time t = 0; t <= 10; ++t) {
        CHECK(std::abs(n1.weight(t)(0, 0) - 2.0) <= 1e-10 * 2.0);
        CHECK(std::abs(n2.weight(t)(0, 0) - 3.0) <= 1e-10 * 3.0);
    }
    CHECK(n1.tail_bound() <= 1e-10);
    CHECK(n2.equivalence(0) == doctest::Approx(std::sqrt(3.0)));
    CHECK(estimate_epsilon(n2) < 1e-12);
}

TEST_CASE("deterministic cocycle has the same B_eps at every sample")
{
    Mat A(2, 2);
    A << 0.5, 0.4, 0.0, 0.25;
    const Cocycle c = constant_cocycle(A);
    const SpectrumReport rep = lyapunov_spectrum(c, {.n_steps = 2000, .n_samples = 4});
    const double b0 = adapted_random_norm(c, rep, {0, 0}, 0, 2).equivalence(0);
    for (std::uint64_t path : {1, 5, 9}) {
        CHECK(adapted_random_norm(c, rep, {path, 17}, 0, 2).equivalence(0) == doctest::Approx(b0).epsilon(1e-9));
    }
}

TEST_CASE("adapted norm sandwich on i.i.d. scalar and triangular cocycles")
{
    const Cocycle s = scalar_coin(2.0, 0.125, 9);
    const SpectrumReport srep = lyapunov_spectrum(s, {.n_steps = 10000, .n_samples = 16});
    const Cocycle tri = triangular();
    const SpectrumReport trep = lyapunov_spectrum(tri, {.n_steps = 10000, .n_samples = 16});
    for (std::uint64_t path = 0; path < 8; ++path) {
        const RandomNorm ns = adapted_random_norm(s, srep, {path, 0}, 0, 50);
        CHECK(ns.tail_bound() <= 1e-10);
        const RandomEstCheck cs = check_random_est(ns, srep, 50, 1e-10);
        CHECK(cs.violations == 0);
        CHECK(cs.worst_lower_inf[0] <= 1.0 + 1e-10);

        const RandomNorm nt = adapted_random_norm(tri, trep, {path, 0}, 0, 50);
        const RandomEstCheck ct = check_random_est(nt, trep, 50, 1e-10);
        CHECK(ct.violations == 0);
        CHECK(estimate_epsilon(nt) >= 0.0);
    }
}

TEST_CASE("one-sided adapted norm gives only the upper half of the sandwich")
{
    const Cocycle s = scalar_coin(2.0, 0.125, 9);
    const SpectrumReport rep = lyapunov_spectrum(s, {.n_steps = 10000, .n_samples = 16});
    RandomNormOptions one;
    one.two_sided = false;
    std::size_t lower_failures = 0;
    for (std::uint64_t path = 0; path < 8; ++path) {
        const RandomNorm n = adapted_random_norm(s, rep, {path, 0}, 0, 50, one);
        const RandomEstCheck c = check_random_est(n, rep, 50, 1e-10);
        CHECK(c.worst_upper[0] <= 1.0 + 1e-10);
        lower_failures += c.worst_lower[0] > 1.0 + 1e-10 ? 1 : 0;
    }
    CHECK(lower_failures > 0);
}

TEST_CASE("rds_from_system equivalence check")
{
    const SemilinearSystem autonomous = fixtures::make_system(fixtures::scalar(0.5), fixtures::sine(1, 0.1), 0, 30);
    EquivalenceCheck check;
    const RandomSystem r = rds_from_system(autonomous, coin(1), {3, 200, 0, 2.0}, &check);
    CHECK(check.residual == 0.0);
    CHECK((r.psi(7, {0, 0}, Vec::Constant(1, 1.3)) -
           general_solution(autonomous, 7, 0, {0, 0}, Vec::Constant(1, 1.3)))
              .norm() == 0.0);

    auto mds = coin(4);
    SemilinearSystem driven = autonomous;
    driven.linear.matrix = [mds](Time t, const Omega& w) {
        return fixtures::scalar(mds->symbol(w.shifted(t)) == 0 ? 0.4 : 0.7);
    };
    (void)rds_from_system(driven, mds, {3, 200, 0, 2.0}, &check);
    CHECK(check.residual < 1e-12);

    SemilinearSystem explicit_t = driven;
    explicit_t.linear.matrix = [mds](Time t, const Omega& w) {
        return fixtures::scalar((mds->symbol(w.shifted(t)) == 0 ? 0.4 : 0.7) * (1.0 + 0.01 * static_cast<double>(t)));
    };
    CHECK_THROWS_AS((void)rds_from_system(explicit_t, mds, {3, 200, 0, 2.0}, &check), InvalidArgument);
    CHECK(check.residual > 1e-6);
    CHECK(check.t > check.tau);
}

namespace {

RandomSystem coin_system(double c)
{
    Mat t0(2, 2), t1(2, 2);
    t0 << 0.5, 0.2, 0.0, 0.3;
    t1 << 0.3, -0.1, 0.1, 0.6;
    RandomSystem r;
    r.linear = switching_cocycle({t0, t1}, 21);
    if (c != 0.0) {
        r.nonlinear = [c](const ShiftMDS&, const Omega&, const Vec& x) -> Vec { return c * x.array().sin().matrix(); };
        r.jacobian = [c](const ShiftMDS&, const Omega&, const Vec& x) -> Mat {
            return (c * x.array().cos()).matrix().asDiagonal();
        };
    }
    return r;
}

RdsOptions fast_options()
{
    RdsOptions opt;
    opt.bounds.sampling = {5, 300, 2000, 5.0};
    opt.verify.sampling = {6, 30, 30, 5.0};
    opt.verify.lipschitz_pairs = 50;
    opt.verify.gronwall_pairs = 50;
    return opt;
}

}  // namespace

TEST_CASE("zero nonlinearity gives the identity conjugacy")
{
    const RandomSystem r = coin_system(0.0);
    const SpectrumReport rep = lyapunov_spectrum(r.linear, {.n_steps = 4000, .n_samples = 16});
    const RdsLinearization lin = rds_linearize(r, rep, {2, 0}, TimeWindow(0, 20), fast_options());
    CHECK(lin.growth_worst_ratio <= 1.0 + 1e-10);
    Sampler s(3);
    for (int i = 0; i < 20; ++i) {
        const Vec xi = s.in_ball(2, 5.0);
        const Time t = s.time(0, 20);
        CHECK((lin.h(t, xi) - xi).norm() < 1e-14);
        CHECK((lin.h_inv(t, xi) - xi).norm() < 1e-14);
    }
}

TEST_CASE("Bernoulli-driven linearization conjugates orbits")
{
    const RandomSystem r = coin_system(0.1);
    const SpectrumReport rep = lyapunov_spectrum(r.linear, {.n_steps = 4000, .n_samples = 16});
    REQUIRE(rep.all_negative());
    const RdsLinearization lin = rds_linearize(r, rep, {2, 0}, TimeWindow(0, 30), fast_options());
    for (const auto& c : lin.checks) CHECK_MESSAGE(c.pass, c.name);
    CHECK(lin.growth_worst_ratio <= 1.0 + 1e-10);
    CHECK(lin.verification.conjugation_H.max <= 1e-7);
    CHECK(lin.verification.conjugation_G.max <= 1e-7);
    CHECK(lin.verification.near_identity_H.max <= lin.near_identity_bound);
    CHECK(lin.verification.near_identity_G.max <= lin.near_identity_bound);

    // Orbit conjugation against ψ directly: h(θᵗω, Φ(t,ω)ξ) = ψ(t, ω, h(ω, ξ)).
    const Omega w{2, 0};
    Sampler s(8);
    for (int i = 0; i < 10; ++i) {
        const Vec xi = s.in_ball(2, 3.0);
        const Time t = s.time(1, 30);
        const Vec lhs = lin.h(t, cocycle_products(r.linear, t, w) * xi);
        const Vec rhs = r.psi(t, w, lin.h(0, xi));
        CHECK((lhs - rhs).norm() <= 1e-7);
    }
}

TEST_CASE("linearization refuses a nonlinearity above alpha")
{
    const RandomSystem r = coin_system(0.9);
    const SpectrumReport rep = lyapunov_spectrum(r.linear, {.n_steps = 4000, .n_samples = 16});
    try {
        (void)rds_linearize(r, rep, {2, 0}, TimeWindow(0, 20), fast_options());
        FAIL("expected a refusal");
    } catch (const LinearizationRefused& e) {
        CHECK(std::string(e.what()).find("L <= alpha") != std::string::npos);
        CHECK(e.checks.size() == 3);
        CHECK_FALSE(e.checks[0].pass);
    }
}
