#include "conjlab/harness.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace conjlab;
using nlohmann::json;

namespace {

json scalar_doc()
{
    return json::parse(R"({
        "system": {"family": "scalar", "coefficients": [0.5],
                   "nonlinearity": {"kind": "trig", "coefficient": 0.1}},
        "window": {"t_min": 0, "t_max": 100},
        "sampling": {"seed": 7, "points": 40, "pairs": 40, "radius": 10.0}
    })");
}

json linear_doc()
{
    return json::parse(R"({
        "system": {"family": "diagonal", "coefficients": [0.5, 0.25, 0.8], "nonlinearity": {"kind": "none"}},
        "window": {"t_min": 0, "t_max": 30},
        "sampling": {"seed": 3, "points": 50, "pairs": 50, "radius": 5.0}
    })");
}

json rds_doc()
{
    return json::parse(R"({
        "rds": {"mds": {"kind": "bernoulli", "probabilities": [0.5, 0.5], "seed": 1},
                "generators": [[[2.0]], [[0.125]]],
                "spectrum": {"n_steps": 2000, "n_samples": 8},
                "norm_check": {"t_max": 20, "paths": 4}},
        "window": {"t_min": 0, "t_max": 20},
        "sampling": {"seed": 1, "points": 20, "pairs": 20, "radius": 1.0}
    })");
}

std::filesystem::path scratch(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / ("conjlab_harness_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

std::size_t lines(const std::string& text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

void expect_invalid(const json& doc, const std::string& fragment)
{
    try {
        (void)parse_config(doc);
        FAIL("expected the config to be rejected: " << fragment);
    } catch (const InvalidArgument& e) {
        CHECK_MESSAGE(std::string(e.what()).find(fragment) != std::string::npos, e.what());
    }
}

}  // namespace

TEST_CASE("config schema rejects unknown keys, missing seeds and bad values")
{
    json doc = scalar_doc();
    doc["extra"] = 1;
    expect_invalid(doc, "unknown key 'extra'");

    doc = scalar_doc();
    doc["system"]["nonlinearity"]["amplitude"] = 1;
    expect_invalid(doc, "system.nonlinearity: unknown key 'amplitude'");

    doc = scalar_doc();
    doc["sampling"].erase("seed");
    expect_invalid(doc, "sampling.seed");

    doc = rds_doc();
    doc["rds"]["mds"].erase("seed");
    expect_invalid(doc, "rds.mds.seed");

    doc = scalar_doc();
    doc["system"]["family"] = "banded";
    expect_invalid(doc, "unknown family");

    doc = scalar_doc();
    doc["window"]["t_max"] = -1;
    expect_invalid(doc, "t_max must exceed");

    doc = scalar_doc();
    doc["system"]["dimension"] = 3;
    expect_invalid(doc, "system.dimension");

    doc = scalar_doc();
    doc["sampling"]["points"] = 2.5;
    expect_invalid(doc, "expected an integer");

    doc = rds_doc();
    doc["rds"]["generators"] = json::parse("[[[0.5]]]");
    expect_invalid(doc, "one matrix per Bernoulli symbol");

    expect_invalid(json::parse(R"({"sampling": {"seed": 1}})"), "needs a system or an rds section");
}

TEST_CASE("config defaults, hash and overrides")
{
    const ExperimentConfig c = parse_config(scalar_doc());
    CHECK(c.composition_tolerance == 1e-8);
    CHECK(c.solver_tolerance == 1e-10);
    CHECK(c.system->matrix(0, 0) == 0.5);
    CHECK(c.hash().size() == 64);
    CHECK(c.hash() == parse_config(scalar_doc()).hash());

    json with_output = scalar_doc();
    with_output["output"] = {{"dir", "elsewhere"}};
    CHECK(parse_config(with_output).hash() == c.hash());

    const ExperimentConfig o = apply_overrides(c, {.seed = 99, .samples = 5, .tolerance = 1e-6, .out_dir = {}});
    CHECK(o.sampling.seed == 99);
    CHECK(o.sampling.points == 5);
    CHECK(o.composition_tolerance == 1e-6);
    CHECK(o.hash() != c.hash());
    CHECK_THROWS_AS((void)apply_overrides(c, {.tolerance = -1.0}), InvalidArgument);

    // The document reparses to the same configuration.
    CHECK(parse_config(c.document()).hash() == c.hash());
}

TEST_CASE("rotation-scale and polynomial families")
{
    json doc = scalar_doc();
    doc["system"] = json::parse(R"({"family": "rotation_scale", "coefficients": [0.6, 0.7],
        "nonlinearity": {"kind": "polynomial", "terms": [{"power": 2, "coefficient": 0.5}, {"power": 3, "coefficient": -1}]}})");
    const ExperimentConfig c = parse_config(doc);
    const SemilinearSystem sys = build_system(c);
    Mat expected(2, 2);
    expected << 0.6 * std::cos(0.7), -0.6 * std::sin(0.7), 0.6 * std::sin(0.7), 0.6 * std::cos(0.7);
    CHECK((step_matrix(sys, 3, {}) - expected).norm() == 0.0);
    Vec x(2);
    x << 0.3, -2.0;
    const Vec f = nonlinear_term(sys, 0, {}, x);
    CHECK(f(0) == doctest::Approx(0.5 * 0.09 - 0.027));
    CHECK(f(1) == doctest::Approx(0.5 * 4 + 8));
    const Mat J = nonlinearity_jacobian(sys, 0, {}, x);
    CHECK(J(0, 0) == doctest::Approx(0.3 - 3 * 0.09));
    CHECK(J(1, 1) == doctest::Approx(-2.0 - 12.0));
    CHECK(J(0, 1) == 0.0);
    const Vec v = Vec::Ones(2);
    const Vec d2 = nonlinearity_derivative(sys, 0, {}, x, std::vector<Vec>{v, v}, 1e-3);
    CHECK(d2(0) == doctest::Approx(1.0 - 6 * 0.3));
    CHECK(d2(1) == doctest::Approx(1.0 + 12.0));

    NonlinearSpec trig{"trig", 0.2, 3.0, {}};
    const double h = 1e-4;
    for (int j = 1; j <= 4; ++j) {
        const double fd = (trig.derivative(0.4 + h, j - 1) - trig.derivative(0.4 - h, j - 1)) / (2 * h);
        CHECK(trig.derivative(0.4, j) == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("linear config gives identity conjugacies")
{
    const RunReport r = run(parse_config(linear_doc()), Command::verify);
    CHECK(r.exit_code() == 0);
    const StageReport* v = r.stage("verification");
    REQUIRE(v != nullptr);
    for (const auto& res : v->residuals) {
        if (res.name == "gronwall_ratio") continue;
        CHECK_MESSAGE(res.max < 1e-12, res.name);
    }
}

TEST_CASE("scalar config matches the pinned golden run")
{
    const ExperimentConfig c = parse_config(scalar_doc());
    const RunReport r = run(c, Command::check);
    const StageReport* h = r.stage("hypotheses");
    REQUIRE(h != nullptr);
    CHECK(h->constants.at("K") == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(h->constants.at("alpha") == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(h->constants.at("M") == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(h->constants.at("max_inverse_norm") == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(r.exit_code() == 0);

    // H(t, ξ) from a 90-digit Picard iteration of the same series.
    const struct {
        Time t;
        double xi;
        double H;
    } golden[] = {
        {0, -10, -10.0},
        {1, -10, -10.091294525072762765},
        {1, 0.3, 0.35646424733950353572},
        {10, -1.5, -1.475265007590085548},
        {10, 7, 7.0885066290591145336},
        {50, 0.3, 0.41977889022230140625},
        {100, -10, -10.10483842165004073},
        {100, -1.5, -1.4751722026966895241},
        {100, 7, 7.0884812098840724441},
    };
    const ConjugacySolution sol = ConjugacySolution::build(build_system(c), {});
    for (const auto& g : golden) {
        CHECK(sol.H(g.t, Vec::Constant(1, g.xi))(0) == doctest::Approx(g.H).epsilon(1e-9));
    }
}

TEST_CASE("repeat runs are byte identical and JSON round-trips")
{
    const ExperimentConfig c = parse_config(scalar_doc());
    const RunReport a = run(c, Command::report);
    const RunReport b = run(c, Command::report);
    CHECK(report_json(a) == report_json(b));
    CHECK(samples_csv(a) == samples_csv(b));
    CHECK(a.exit_code() == 0);

    const RunReport back = json::parse(report_json(a)).get<RunReport>();
    CHECK(back == a);
    CHECK(report_json(back) == report_json(a));

    const auto dir = scratch("emit");
    const EmittedFiles files = emit(a, dir);
    CHECK(slurp(files.json) == report_json(a));
    const std::string csv = slurp(files.samples_csv);
    CHECK(lines(csv) == a.samples.size() + 1);
    CHECK(csv.rfind("stage,kind,t,s,point_norm,value\n", 0) == 0);
    CHECK(!a.samples.empty());
    CHECK(lines(slurp(files.traces_csv)) == 1);
}

TEST_CASE("empty sample set emits valid JSON with empty arrays")
{
    RunReport r;
    r.artifact_version = artifact_version();
    r.command = "check";
    const json j = json::parse(report_json(r));
    CHECK(j.at("samples").is_array());
    CHECK(j.at("samples").empty());
    CHECK(j.at("stages").empty());
    CHECK(j.at("spectrum").is_null());
    CHECK(j.get<RunReport>() == r);
    CHECK(lines(samples_csv(r)) == 1);
}

TEST_CASE("exit codes separate condition failures from hard errors")
{
    json doc = scalar_doc();
    doc["system"]["nonlinearity"]["coefficient"] = 0.9;
    const RunReport cond = run(parse_config(doc), Command::verify);
    CHECK(cond.exit_code() == 2);
    CHECK_FALSE(cond.hard_error());
    bool found = false;
    for (const auto& v : cond.stage("hypotheses")->verdicts) {
        if (v.name == "K*L < 1-alpha") {
            found = true;
            CHECK_FALSE(v.pass);
            CHECK(v.threshold == doctest::Approx(0.5));
        }
    }
    CHECK(found);
    REQUIRE_FALSE(cond.failures.empty());
    CHECK(cond.failures.front().condition);

    // A cubic term is small on the sampled ball but backward orbits overflow.
    doc = scalar_doc();
    doc["system"]["nonlinearity"] = json::parse(R"({"kind": "polynomial", "terms": [{"power": 3, "coefficient": 0.001}]})");
    doc["sampling"]["radius"] = 2.0;
    const RunReport hard = run(parse_config(doc), Command::conjugate);
    CHECK(hard.exit_code() == 1);
    CHECK(hard.hard_error());

    CHECK_THROWS_AS((void)run(parse_config(scalar_doc()), Command::spectrum), InvalidArgument);
    CHECK_THROWS_AS((void)parse_command("plot"), InvalidArgument);
    for (const char* name : {"check", "conjugate", "verify", "spectrum", "localize", "report"}) {
        CHECK(command_name(parse_command(name)) == name);
    }
}

TEST_CASE("cache hits, corruption and version bumps")
{
    const auto dir = scratch("cache");
    const Cache::Key key{"spectrum-test", 5, 100, sha256_hex("params")};
    int calls = 0;
    const auto make = [&] {
        ++calls;
        return json{{"value", 0.1 + calls}};
    };

    Cache cache(dir);
    const json first = cache.get_or_create(key, make);
    CHECK(calls == 1);
    CHECK(cache.stats().misses == 1);
    const json second = cache.get_or_create(key, make);
    CHECK(calls == 1);
    CHECK(cache.stats().hits == 1);
    CHECK(second == first);

    // Truncate the entry.
    const auto path = cache.path_for(key);
    const std::string full = slurp(path);
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << full.substr(0, full.size() / 2);
    }
    (void)cache.get_or_create(key, make);
    CHECK(calls == 2);
    CHECK(cache.stats().regenerated == 1);

    // Payload edited but checksum left alone.
    json entry = json::parse(slurp(path));
    entry["payload"]["value"] = 42.0;
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << entry.dump();
    }
    (void)cache.get_or_create(key, make);
    CHECK(calls == 3);
    CHECK(cache.stats().regenerated == 2);

    Cache bumped(dir, kCacheVersion + 1);
    CHECK(bumped.path_for(key) != cache.path_for(key));
    (void)bumped.get_or_create(key, make);
    CHECK(calls == 4);
    CHECK(bumped.stats().misses == 1);

    const Cache::Key other{"spectrum-test", 6, 100, key.params};
    CHECK(cache.path_for(other) != cache.path_for(key));
}

TEST_CASE("cached spectrum reproduces downstream numbers")
{
    const auto dir = scratch("spectrum");
    json doc = rds_doc();
    doc["output"] = {{"cache_dir", dir.string()}};
    const ExperimentConfig c = parse_config(doc);
    const RunReport cold = run(c, Command::spectrum);
    bool cached_file = false;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.path().filename().string().rfind("spectrum-bernoulli-s1-n2000", 0) == 0) cached_file = true;
    }
    CHECK(cached_file);
    const RunReport warm = run(c, Command::spectrum);
    CHECK(report_json(cold) == report_json(warm));
    CHECK(cold.exit_code() == 0);
    REQUIRE(cold.spectrum.has_value());
    CHECK(cold.spectrum->lambdas.front() == doctest::Approx(-std::log(2.0)).epsilon(0.05));

    json uncached = rds_doc();
    CHECK(report_json(run(parse_config(uncached), Command::spectrum)).size() > 0);
    const RunReport plain = run(parse_config(uncached), Command::spectrum);
    // Without a cache there is no stream verdict; the spectrum itself is identical.
    CHECK(plain.spectrum == cold.spectrum);

    const std::string traces = traces_csv(cold);
    CHECK(lines(traces) == cold.spectrum->trace.size() + 1);
    CHECK(traces.rfind("step,lambda_1\n", 0) == 0);

    SpectrumReport direct = lyapunov_spectrum(build_rds(*c.rds).linear, {.n_steps = 2000, .n_samples = 8});
    const SpectrumReport back = spectrum_from_json(spectrum_to_json(direct));
    CHECK(back.lambdas == direct.lambdas);
    CHECK(back.raw_exponents == direct.raw_exponents);
    REQUIRE(back.splitting.size() == direct.splitting.size());
    for (std::size_t i = 0; i < back.splitting.size(); ++i) CHECK(back.splitting[i] == direct.splitting[i]);
}

TEST_CASE("localization config persists its cutoff table")
{
    const auto dir = scratch("local");
    json doc = json::parse(R"({
        "rds": {"mds": {"kind": "bernoulli", "probabilities": [0.5, 0.5], "seed": 8},
                "generators": [[[0.3]], [[0.6]]],
                "nonlinearity": {"kind": "polynomial", "terms": [{"power": 2, "coefficient": 1.0}]},
                "omega": {"path": 1, "shift": 0},
                "spectrum": {"n_steps": 4000, "n_samples": 16},
                "norm_check": {"t_max": 10, "paths": 2}},
        "localization": {"target_L": 0.1, "orbits": 6, "pairs": 2000, "seed": 17},
        "window": {"t_min": 0, "t_max": 25},
        "sampling": {"seed": 5, "points": 300, "pairs": 2000, "radius": 1.0}
    })");
    doc["output"] = {{"cache_dir", dir.string()}};
    const ExperimentConfig c = parse_config(doc);
    const RunReport r = run(c, Command::localize);
    CHECK(r.exit_code() == 0);
    const StageReport* s = r.stage("localization");
    REQUIRE(s != nullptr);
    CHECK(s->constants.at("sigma_min") > 0.0);

    const auto table_path = dir / ("cutoff-" + c.hash().substr(0, 16) + ".json");
    REQUIRE(std::filesystem::exists(table_path));
    const json table = json::parse(slurp(table_path));
    CHECK(table.at("table").size() == 26);
    CHECK(table.at("target_L") == 0.1);
    CHECK(table.at("fallback").get<double>() == s->constants.at("sigma_min"));

    json linear = doc;
    linear["rds"]["nonlinearity"] = json::parse(R"({"kind": "polynomial", "terms": [{"power": 1, "coefficient": 0.5}]})");
    const RunReport refused = run(parse_config(linear), Command::localize);
    CHECK(refused.exit_code() == 2);
    REQUIRE_FALSE(refused.failures.empty());
    CHECK(refused.failures.back().message.find("does not vanish") != std::string::npos);
}
