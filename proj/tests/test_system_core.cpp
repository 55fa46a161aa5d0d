#include "doctest.h"
#include "fixtures.hpp"

#include "conjlab/sampling.hpp"

using namespace conjlab;
using fixtures::make_system;
using fixtures::scalar;

TEST_CASE("evolution operator basics")
{
    auto sys = make_system(scalar(0.5), Nonlinearity::zero(1));
    CHECK(evolution_operator(sys, 4, 4, {})(0, 0) == 1.0);
    CHECK(evolution_operator(sys, 3, 0, {})(0, 0) == doctest::Approx(0.125).epsilon(1e-15));
    CHECK(evolution_operator(sys, 0, 3, {})(0, 0) == doctest::Approx(8.0).epsilon(1e-15));

    Mat rot(2, 2);
    rot << 0, 1, -1, 0;
    rot *= 0.5;
    auto sys2 = make_system(rot, Nonlinearity::zero(2));
    CHECK((evolution_operator(sys2, 2, 0, {}) - rot * rot).norm() < 1e-15);
}

TEST_CASE("evolution operator cocycle and inverse properties on a time-varying system")
{
    SemilinearSystem sys;
    sys.dim = 3;
    sys.linear.matrix = [](Time t, const Omega&) {
        Mat A(3, 3);
        const double c = std::cos(0.3 * t), s = std::sin(0.3 * t);
        A << 0.6 + 0.1 * c, 0.2 * s, 0.0, -0.1, 0.5, 0.1 * c, 0.05, 0.0, 0.4 + 0.1 * s;
        return A;
    };
    sys.nonlinear = Nonlinearity::zero(3);
    sys.norms = NormFamily::euclidean(3);
    sys.window = TimeWindow(-10, 20);
    Sampler rng(3);
    for (int i = 0; i < 50; ++i) {
        const Time t = rng.time(-10, 20), p = rng.time(-10, 20), s = rng.time(-10, 20);
        const Mat ts = evolution_operator(sys, t, s, {});
        const Mat prod = evolution_operator(sys, t, p, {}) * evolution_operator(sys, p, s, {});
        const double scale = evolution_operator(sys, t, p, {}).norm() * evolution_operator(sys, p, s, {}).norm();
        CHECK((ts - prod).norm() <= 1e-12 * std::max(1.0, scale));
        const Mat back = evolution_operator(sys, s, t, {});
        CHECK((ts * back - Mat::Identity(3, 3)).norm() <= 1e-12 * std::max(1.0, ts.norm() * back.norm()));
    }
}

TEST_CASE("singular step is reported with its time")
{
    SemilinearSystem sys = make_system(scalar(0.5), Nonlinearity::zero(1), 0, 10);
    sys.linear.matrix = [](Time t, const Omega&) { return scalar(t == 4 ? 0.0 : 0.5); };
    try {
        (void)evolution_operator(sys, 0, 8, {});
        FAIL("expected SingularStep");
    } catch (const SingularStep& e) {
        CHECK(e.step == 4);
    }
}

TEST_CASE("general solution")
{
    auto lin = make_system(scalar(0.5), fixtures::linear_f(0.1));
    CHECK(general_solution(lin, 4, 0, {}, Vec::Ones(1))(0) == doctest::Approx(0.1296).epsilon(1e-14));

    auto sine = make_system(scalar(0.5), fixtures::sine(1, 0.1));
    CHECK(general_solution(sine, 3, 0, {}, Vec::Ones(1))(0) == doctest::Approx(0.20763990486160666).epsilon(1e-15));
    CHECK(general_solution(sine, 7, 7, {}, Vec::Constant(1, 2.5))(0) == 2.5);

    auto zero = make_system(scalar(0.5), Nonlinearity::zero(1));
    CHECK(general_solution(zero, 5, 2, {}, Vec::Ones(1))(0) == doctest::Approx(0.125).epsilon(1e-15));

    // two-parameter identity for forward triples τ ≤ s ≤ t
    Sampler rng(11);
    for (int i = 0; i < 200; ++i) {
        const Time tau = rng.time(0, 100), s = rng.time(tau, 100), t = rng.time(s, 100);
        const Vec xi = Vec::Constant(1, rng.uniform(-10, 10));
        const Vec direct = general_solution(sine, t, tau, {}, xi);
        const Vec split = general_solution(sine, t, s, {}, general_solution(sine, s, tau, {}, xi));
        CHECK(std::abs(direct(0) - split(0)) <= 1e-10);
    }

    // backward branch inverts the forward one
    for (int i = 0; i < 50; ++i) {
        const Time tau = rng.time(0, 90), t = tau + rng.time(0, 10);
        const Vec xi = Vec::Constant(1, rng.uniform(-10, 10));
        const Vec back = general_solution(sine, tau, t, {}, general_solution(sine, t, tau, {}, xi));
        CHECK(std::abs(back(0) - xi(0)) <= 1e-10 * std::pow(1.6 / 0.4, double(t - tau)));
    }
}

TEST_CASE("invert step")
{
    auto zero = make_system(scalar(2.0), Nonlinearity::zero(1));
    CHECK(invert_step(zero, 0, {}, Vec::Ones(1))(0) == 0.5);

    auto sine = make_system(scalar(2.0), fixtures::sine(1, 0.1));
    const Vec x = invert_step(sine, 0, {}, Vec::Ones(1));
    CHECK(x(0) == doctest::Approx(0.47704231461746306).epsilon(1e-12));
    CHECK(invert_step(sine, 0, {}, Vec::Zero(1))(0) == 0.0);

    InvertOptions opts;
    opts.lipschitz = 2.5;
    try {
        (void)invert_step(sine, 0, {}, Vec::Ones(1), opts);
        FAIL("expected ContractionViolated");
    } catch (const ContractionViolated& e) {
        CHECK(e.measured == doctest::Approx(1.25));
    }
}

TEST_CASE("backward solution refuses when A+F is not invertible by contraction")
{
    auto sys = make_system(scalar(0.5), fixtures::linear_f(-0.9));
    CHECK_THROWS_AS((void)general_solution(sys, 0, 3, {}, Vec::Ones(1)), ContractionViolated);
}

TEST_CASE("operator norm")
{
    const NormFamily eu = NormFamily::euclidean(2);
    Mat d = Eigen::Vector2d(2.0, 3.0).asDiagonal();
    CHECK(operator_norm(d, 0, 1, {}, eu) == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(operator_norm(Mat::Identity(2, 2), 0, 0, {}, NormFamily::constant(Eigen::Vector2d(2.0, 5.0).asDiagonal())) ==
          doctest::Approx(1.0).epsilon(1e-15));

    // W_s = diag(1,4), W_t = I, M = I: dense sampling of the s-unit sphere
    const NormFamily mixed = NormFamily::from_weights(2, [](Time t, const Omega&) {
        Mat W = Mat::Identity(2, 2);
        if (t == 0) W(1, 1) = 4.0;
        return W;
    });
    double sampled = 0.0;
    for (int k = 0; k < 20000; ++k) {
        const double th = 2 * M_PI * k / 20000.0;
        const Vec x = Eigen::Vector2d(std::cos(th), 0.5 * std::sin(th));
        sampled = std::max(sampled, x.norm());
    }
    CHECK(sampled == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(operator_norm(Mat::Identity(2, 2), 0, 1, {}, mixed) == doctest::Approx(sampled).epsilon(1e-12));
}

TEST_CASE("norm family validation and equivalence")
{
    Mat bad(2, 2);
    bad << 1, 2, 2, 1;
    CHECK_THROWS_AS((void)NormFamily::constant(bad), InvalidArgument);
    Mat asym(2, 2);
    asym << 1, 0.5, 0, 1;
    CHECK_THROWS_AS((void)NormFamily::constant(asym), InvalidArgument);

    Sampler rng(5);
    const NormFamily fam = NormFamily::from_weights(3, [](Time t, const Omega&) {
        Mat B(3, 3);
        B << 1, 0.2 * t, 0, 0, 2, 0.1, 0.3, 0, 0.5;
        return Mat(B.transpose() * B + 0.1 * Mat::Identity(3, 3));
    });
    for (int i = 0; i < 500; ++i) {
        const Time t = rng.time(-5, 5);
        const Vec x = rng.in_ball(3, 10.0);
        const double ell = fam.ell(t, {});
        const double n = fam.norm(x, t, {});
        CHECK(n <= ell * x.norm() * (1 + 1e-12));
        CHECK(x.norm() / ell <= n * (1 + 1e-12));
    }
}

TEST_CASE("variation of constants")
{
    auto sys = make_system(scalar(0.5), Nonlinearity::zero(1));
    const Forcing one = [](Time, const Omega&) { return Vec::Ones(1); };
    CHECK(variation_of_constants(sys, 3, 0, {}, Vec::Zero(1), one)(0) == doctest::Approx(1.75).epsilon(1e-15));
    const Forcing none = [](Time, const Omega&) { return Vec::Zero(1); };
    CHECK(variation_of_constants(sys, 3, 0, {}, Vec::Ones(1), none)(0) == doctest::Approx(0.125).epsilon(1e-15));

    Sampler rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const int d = 1 + static_cast<int>(rng.index(5));
        std::vector<Mat> As;
        std::vector<Vec> fs;
        for (int i = 0; i < 100; ++i) {
            As.push_back(Mat::Random(d, d) * 0.3);
            fs.push_back(Vec::Random(d));
        }
        SemilinearSystem s;
        s.dim = d;
        s.linear.matrix = [As](Time t, const Omega&) { return As[static_cast<std::size_t>(t)]; };
        s.nonlinear = Nonlinearity::zero(d);
        s.norms = NormFamily::euclidean(d);
        s.window = TimeWindow(0, 99);
        const Forcing f = [fs](Time i, const Omega&) { return fs[static_cast<std::size_t>(i)]; };
        const Vec xi = Vec::Random(d);
        const Time tau = rng.time(0, 30), t = rng.time(tau, 99);
        Vec x = xi;
        for (Time i = tau; i < t; ++i) x = As[static_cast<std::size_t>(i)] * x + fs[static_cast<std::size_t>(i)];
        const Vec v = variation_of_constants(s, t, tau, {}, xi, f);
        CHECK((v - x).norm() <= 1e-12 * std::max(1.0, x.norm()));
    }
}

TEST_CASE("nonlinearity derivatives fall back to finite differences")
{
    auto sys = make_system(scalar(0.5), fixtures::square(0.05));
    const Vec x = Vec::Constant(1, 1.5);
    CHECK(nonlinearity_jacobian(sys, 0, {}, x)(0, 0) == doctest::Approx(0.15).epsilon(1e-8));
    const std::vector<Vec> dirs{Vec::Ones(1), Vec::Ones(1)};
    CHECK(nonlinearity_derivative(sys, 0, {}, x, dirs, 1e-4)(0) == doctest::Approx(0.1).epsilon(1e-6));
}

TEST_CASE("system validation")
{
    auto sys = make_system(scalar(0.5), fixtures::constant_f(1.0));
    sys.nonlinear.zero_fixed_point = true;
    CHECK_THROWS_AS(sys.validate(), InvalidArgument);
    auto ok = make_system(scalar(0.5), fixtures::sine(1, 0.1));
    CHECK_NOTHROW(ok.validate());
}
