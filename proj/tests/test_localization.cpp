#include "conjlab/localization.hpp"
#include "fixtures.hpp"

#include <doctest.h>

#include <cmath>

using namespace conjlab;

namespace {

RandomSystem scalar_rds(double a0, double a1, std::function<double(double)> f, std::uint64_t seed = 3)
{
    RandomSystem r;
    r.linear.dim = 1;
    r.linear.mds = std::make_shared<const ShiftMDS>(ShiftMDS::bernoulli({0.5, 0.5}, seed));
    r.linear.generator = [a0, a1](const ShiftMDS& m, const Omega& w) {
        return fixtures::scalar(m.symbol(w) == 0 ? a0 : a1);
    };
    if (f) {
        r.nonlinear = [f](const ShiftMDS&, const Omega&, const Vec& x) -> Vec { return Vec::Constant(1, f(x(0))); };
    }
    return r;
}

double square(double x) { return x * x; }

std::vector<Omega> orbit_points(const Omega& w, Time n)
{
    std::vector<Omega> out;
    for (Time t = 0; t <= n; ++t) out.push_back(w.shifted(t));
    return out;
}

}  // namespace

TEST_CASE("bump profile")
{
    CHECK(bump(0.0) == 1.0);
    CHECK(bump(1.0) == 1.0);
    CHECK(bump(2.0) == 0.0);
    CHECK(bump(7.0) == 0.0);
    CHECK(bump(1.5) == doctest::Approx(0.5));
    double prev = 1.0;
    for (int i = 1; i <= 1000; ++i) {
        const double v = bump(1.0 + i / 1000.0);
        CHECK(v <= prev);
        prev = v;
    }
    CHECK(bump(1.1) < 1.0);
    CHECK(bump(1.1) > 0.99);
    CHECK(bump(1.9) > 0.0);
    CHECK(bump(1.9) < 0.01);
    CHECK(bump(1.5 + 0.2) == doctest::Approx(1.0 - bump(1.5 - 0.2)).epsilon(1e-14));
}

TEST_CASE("zero nonlinearity admits any radius")
{
    const RandomSystem r = scalar_rds(0.5, 0.5, nullptr);
    const CutoffSystem cut = cutoff_nonlinearity(r, {{0, 0}}, euclidean_weight(1));
    CHECK(cut.sigma({0, 0}) > 1e10);
    CHECK(cut.f_tilde({0, 0}, Vec::Constant(1, 3.0))(0) == 0.0);
}

TEST_CASE("square nonlinearity: dyadic radius and Lipschitz bound")
{
    const RandomSystem r = scalar_rds(0.5, 0.5, square);
    const CutoffSystem cut = cutoff_nonlinearity(r, {{0, 0}}, euclidean_weight(1));
    CHECK(cut.sigma({0, 0}) == 0.015625);
    const CutoffCheck check = verify_cutoff(cut, {0, 0}, 10000, 5);
    CHECK(check.pairs == 10000);
    CHECK(check.lipschitz <= 0.1 * (1 + 1e-6));
    CHECK(check.lipschitz == doctest::Approx(0.063701199464801415).epsilon(0.01));
    CHECK(check.lipschitz <= 0.063701199464801415 * (1 + 1e-6));
    CHECK(check.sup <= 1.0);
    CHECK(check.agrees_inside);
    CHECK(check.inside_points > 1000);
    CHECK(cut.f_tilde({0, 0}, Vec::Constant(1, 0.01))(0) == 0.01 * 0.01);
    CHECK(cut.f_tilde({0, 0}, Vec::Constant(1, 0.0313))(0) == 0.0);
}

TEST_CASE("linear nonlinearity is refused")
{
    const RandomSystem r = scalar_rds(0.5, 0.5, [](double x) { return 0.5 * x; });
    const VanishingCheck vq = vanishing_quotient(r, euclidean_weight(1), {0, 0});
    CHECK_FALSE(vq.vanishes);
    CHECK(vq.inner == doctest::Approx(0.5));
    try {
        (void)cutoff_nonlinearity(r, {{0, 0}}, euclidean_weight(1));
        FAIL("expected a refusal");
    } catch (const InvalidArgument& e) {
        CHECK(std::string(e.what()).find("does not vanish") != std::string::npos);
    }
    const RandomSystem shifted = scalar_rds(0.5, 0.5, [](double x) { return 0.1 + x * x; });
    CHECK_THROWS_AS((void)cutoff_nonlinearity(shifted, {{0, 0}}, euclidean_weight(1)), InvalidArgument);
}

TEST_CASE("escape times")
{
    const RandomSystem contract = scalar_rds(0.5, 0.5, square);
    const CutoffSystem cut = cutoff_nonlinearity(contract, {{0, 0}}, euclidean_weight(1));
    const double sigma = cut.sigma({0, 0});
    EscapeTime e = escape_time(contract, cut, {0, 0}, Vec::Zero(1), 40);
    CHECK(e.reached_cap);
    CHECK(e.last_inside == 40);
    e = escape_time(contract, cut, {0, 0}, Vec::Constant(1, 0.9 * sigma), 40);
    CHECK(e.reached_cap);
    e = escape_time(contract, cut, {0, 0}, Vec::Constant(1, 1.5 * sigma), 40);
    CHECK(e.last_inside == -1);

    const RandomSystem expand = scalar_rds(2.0, 2.0, square);
    e = escape_time(expand, cut, {0, 0}, Vec::Constant(1, sigma / 4), 40);
    CHECK(e.last_inside == 1);
    CHECK_FALSE(e.reached_cap);

    // Shrinking the start along a ray never shortens the stay in U.
    const RandomSystem mild = scalar_rds(1.1, 1.3, square);
    for (const double sign : {1.0, -1.0}) {
        Time prev = -1;
        for (int k = 0; k < 40; ++k) {
            const double x = sign * 0.99 * sigma * std::pow(0.8, k);
            const Time t = escape_time(mild, cut, {2, 0}, Vec::Constant(1, x), 200).last_inside;
            CHECK(t >= prev);
            prev = t;
        }
    }
}

namespace {

struct LocalSetup {
    RandomSystem rds;
    SpectrumReport spectrum;
    std::shared_ptr<RandomNorm> norm;
    Omega w{1, 0};
    TimeWindow window{0, 25};
};

LocalSetup make_setup(std::function<double(double)> f)
{
    LocalSetup s;
    s.rds = scalar_rds(0.3, 0.6, std::move(f), 8);
    s.spectrum = lyapunov_spectrum(s.rds.linear, {.n_steps = 4000, .n_samples = 16});
    s.norm = std::make_shared<RandomNorm>(s.rds.linear, s.spectrum, s.w, 0, s.window.t_max() + 1);
    return s;
}

LocalOptions local_options(const LocalSetup& s)
{
    LocalOptions opt;
    opt.rds.precomputed_norm = s.norm;
    opt.rds.bounds.sampling = {5, 300, 2000, 1.0};
    opt.rds.verify.sampling = {6, 20, 20, 0.01};
    opt.rds.verify.lipschitz_pairs = 20;
    opt.rds.verify.gronwall_pairs = 20;
    opt.orbits = 8;
    return opt;
}

}  // namespace

TEST_CASE("local linearization of the square nonlinearity")
{
    const LocalSetup s = make_setup(square);
    const CutoffSystem cut =
        cutoff_nonlinearity(s.rds, orbit_points(s.w, s.window.t_max()), random_norm_weight(s.norm));
    for (const auto& [w, sigma] : cut.table()) {
        const CutoffCheck check = verify_cutoff(cut, w, 2000, 3);
        CHECK(check.lipschitz <= 0.1 * (1 + 1e-6));
        CHECK(check.agrees_inside);
    }
    const LocalReport rep = local_linearize(cut, s.spectrum, s.w, s.window, local_options(s));
    for (const auto& c : rep.global.checks) CHECK_MESSAGE(c.pass, c.name);
    CHECK(rep.identical);
    CHECK(rep.compared_steps > 0);
    CHECK(rep.max_residual <= 1e-7);
    CHECK(rep.pass());
    for (const auto& o : rep.orbits) CHECK(o.escape >= 0);
}

TEST_CASE("small global nonlinearity: local run matches the global run")
{
    const auto f = [](double x) { return 0.02 * x * x / (1 + x * x); };
    const LocalSetup s = make_setup(f);
    const CutoffSystem cut =
        cutoff_nonlinearity(s.rds, orbit_points(s.w, s.window.t_max()), random_norm_weight(s.norm));
    const LocalOptions opt = local_options(s);
    const LocalReport local = local_linearize(cut, s.spectrum, s.w, s.window, opt);
    RdsOptions global_opt = opt.rds;
    const RdsLinearization global = rds_linearize(s.rds, s.spectrum, s.w, s.window, global_opt);
    Sampler sampler(4);
    for (int i = 0; i < 20; ++i) {
        const Time t = sampler.time(0, 25);
        const Vec xi = Vec::Constant(1, sampler.uniform(-1.0, 1.0));
        CHECK((local.global.h(t, xi) - global.h(t, xi)).norm() <= 1e-10);
    }
    for (const auto& o : local.orbits) CHECK(o.reached_cap);
    CHECK(local.pass());
}

TEST_CASE("smooth local mode adds derivative checks")
{
    const LocalSetup s = make_setup(square);
    const CutoffSystem cut =
        cutoff_nonlinearity(s.rds, orbit_points(s.w, s.window.t_max()), random_norm_weight(s.norm));
    LocalOptions opt = local_options(s);
    opt.mode = LocalMode::smooth;
    opt.rds.smooth_options.sampling = {7, 10, 10, 1.0};
    const LocalReport rep = local_linearize(cut, s.spectrum, s.w, s.window, opt);
    REQUIRE(rep.global.smoothness.has_value());
    CHECK(rep.global.checks.size() == 4);
    CHECK(rep.global.smoothness->orders.size() == 1);
}
