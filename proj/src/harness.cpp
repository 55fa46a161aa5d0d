#include "conjlab/harness.hpp"

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#ifndef CONJLAB_VERSION
#define CONJLAB_VERSION "0.0.0"
#endif

namespace conjlab {

using nlohmann::json;

std::string artifact_version() { return CONJLAB_VERSION; }

std::string sha256_hex(const std::string& data)
{
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int length = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 digest failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * length);
    for (unsigned int i = 0; i < length; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

// ---------------------------------------------------------------- nonlinearity

double NonlinearSpec::value(double x) const { return derivative(x, 0); }

double NonlinearSpec::derivative(double x, int order) const
{
    if (kind == "trig") {
        return coefficient * std::pow(frequency, order) * std::sin(frequency * x + order * std::numbers::pi / 2);
    }
    if (kind == "polynomial") {
        double sum = 0.0;
        for (const auto& [p, c] : terms) {
            if (p < order) continue;
            double falling = 1.0;
            for (int k = 0; k < order; ++k) falling *= p - k;
            sum += c * falling * std::pow(x, p - order);
        }
        return sum;
    }
    return 0.0;
}

// ---------------------------------------------------------------- config parsing

namespace {

/// Object view that rejects keys outside `allowed`.
class Section {
public:
    Section(const json& j, std::string where, std::initializer_list<const char*> allowed) : j_(j), where_(std::move(where))
    {
        if (!j.is_object()) throw InvalidArgument(where_ + ": expected an object");
        const std::set<std::string> keys(allowed.begin(), allowed.end());
        for (const auto& [key, value] : j.items()) {
            if (!keys.contains(key)) throw InvalidArgument(where_ + ": unknown key '" + key + "'");
        }
    }

    [[nodiscard]] bool has(const char* key) const { return j_.contains(key); }
    [[nodiscard]] const json& at(const char* key) const
    {
        if (!has(key)) throw InvalidArgument(path(key) + ": required");
        return j_.at(key);
    }
    [[nodiscard]] std::string path(const char* key) const { return where_ + "." + key; }

    [[nodiscard]] double number(const char* key, std::optional<double> fallback = std::nullopt) const
    {
        if (!has(key)) {
            if (fallback) return *fallback;
            throw InvalidArgument(path(key) + ": required");
        }
        const json& v = j_.at(key);
        if (!v.is_number()) throw InvalidArgument(path(key) + ": expected a number");
        const double x = v.get<double>();
        if (!std::isfinite(x)) throw InvalidArgument(path(key) + ": must be finite");
        return x;
    }

    [[nodiscard]] std::int64_t integer(const char* key, std::optional<std::int64_t> fallback = std::nullopt) const
    {
        if (!has(key)) {
            if (fallback) return *fallback;
            throw InvalidArgument(path(key) + ": required");
        }
        const json& v = j_.at(key);
        if (!v.is_number_integer()) throw InvalidArgument(path(key) + ": expected an integer");
        return v.get<std::int64_t>();
    }

    [[nodiscard]] std::size_t count(const char* key, std::size_t fallback, std::size_t min = 1) const
    {
        const std::int64_t n = integer(key, static_cast<std::int64_t>(fallback));
        if (n < static_cast<std::int64_t>(min)) {
            throw InvalidArgument(path(key) + ": must be at least " + std::to_string(min));
        }
        return static_cast<std::size_t>(n);
    }

    [[nodiscard]] std::uint64_t seed(const char* key) const
    {
        if (!has(key)) throw InvalidArgument(path(key) + ": seeds must be given explicitly");
        const json& v = j_.at(key);
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
            throw InvalidArgument(path(key) + ": expected a nonnegative integer");
        }
        return v.get<std::uint64_t>();
    }

    [[nodiscard]] bool boolean(const char* key, bool fallback) const
    {
        if (!has(key)) return fallback;
        if (!j_.at(key).is_boolean()) throw InvalidArgument(path(key) + ": expected true or false");
        return j_.at(key).get<bool>();
    }

    [[nodiscard]] std::string string(const char* key, std::optional<std::string> fallback = std::nullopt) const
    {
        if (!has(key)) {
            if (fallback) return *fallback;
            throw InvalidArgument(path(key) + ": required");
        }
        if (!j_.at(key).is_string()) throw InvalidArgument(path(key) + ": expected a string");
        return j_.at(key).get<std::string>();
    }

    [[nodiscard]] std::vector<double> numbers(const char* key) const
    {
        const json& v = at(key);
        if (!v.is_array()) throw InvalidArgument(path(key) + ": expected an array of numbers");
        std::vector<double> out;
        for (const auto& x : v) {
            if (!x.is_number() || !std::isfinite(x.get<double>())) {
                throw InvalidArgument(path(key) + ": expected an array of finite numbers");
            }
            out.push_back(x.get<double>());
        }
        return out;
    }

private:
    const json& j_;
    std::string where_;
};

Mat parse_matrix(const json& v, const std::string& where)
{
    if (!v.is_array() || v.empty()) throw InvalidArgument(where + ": expected a nonempty array of rows");
    const std::size_t rows = v.size();
    if (!v[0].is_array() || v[0].empty()) throw InvalidArgument(where + ": expected rows of numbers");
    const std::size_t cols = v[0].size();
    Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r) {
        if (!v[r].is_array() || v[r].size() != cols) throw InvalidArgument(where + ": rows differ in length");
        for (std::size_t c = 0; c < cols; ++c) {
            const json& x = v[r][c];
            if (!x.is_number() || !std::isfinite(x.get<double>())) {
                throw InvalidArgument(where + ": entries must be finite numbers");
            }
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = x.get<double>();
        }
    }
    return m;
}

json matrix_json(const Mat& m)
{
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

NonlinearSpec parse_nonlinearity(const json& j, const std::string& where)
{
    NonlinearSpec f;
    const Section probe(j, where, {"kind", "coefficient", "frequency", "terms"});
    f.kind = probe.string("kind");
    if (f.kind == "none") {
        const Section s(j, where, {"kind"});
    } else if (f.kind == "trig") {
        const Section s(j, where, {"kind", "coefficient", "frequency"});
        f.coefficient = s.number("coefficient");
        f.frequency = s.number("frequency", 1.0);
    } else if (f.kind == "polynomial") {
        const Section s(j, where, {"kind", "terms"});
        const json& terms = s.at("terms");
        if (!terms.is_array()) throw InvalidArgument(where + ".terms: expected an array");
        for (std::size_t i = 0; i < terms.size(); ++i) {
            const std::string at = where + ".terms[" + std::to_string(i) + "]";
            const Section t(terms[i], at, {"power", "coefficient"});
            const std::int64_t p = t.integer("power");
            if (p < 0 || p > 64) throw InvalidArgument(at + ".power: must be in 0..64");
            f.terms.emplace_back(static_cast<int>(p), t.number("coefficient"));
        }
    } else {
        throw InvalidArgument(where + ".kind: unknown nonlinearity '" + f.kind + "' (none, trig, polynomial)");
    }
    return f;
}

json nonlinearity_json(const NonlinearSpec& f)
{
    json j{{"kind", f.kind}};
    if (f.kind == "trig") {
        j["coefficient"] = f.coefficient;
        j["frequency"] = f.frequency;
    } else if (f.kind == "polynomial") {
        j["terms"] = json::array();
        for (const auto& [p, c] : f.terms) j["terms"].push_back({{"power", p}, {"coefficient", c}});
    }
    return j;
}

SystemSpec parse_system(const json& j)
{
    const Section s(j, "system", {"family", "dimension", "coefficients", "matrix", "nonlinearity"});
    SystemSpec sys;
    sys.family = s.string("family");
    if (sys.family == "scalar") {
        sys.coefficients = s.numbers("coefficients");
        if (sys.coefficients.size() != 1) throw InvalidArgument("system.coefficients: scalar family takes [a]");
        sys.matrix = Mat::Constant(1, 1, sys.coefficients[0]);
    } else if (sys.family == "diagonal") {
        sys.coefficients = s.numbers("coefficients");
        if (sys.coefficients.empty()) throw InvalidArgument("system.coefficients: diagonal family needs entries");
        sys.matrix = Eigen::Map<const Vec>(sys.coefficients.data(), static_cast<Eigen::Index>(sys.coefficients.size()))
                         .asDiagonal();
    } else if (sys.family == "rotation_scale") {
        sys.coefficients = s.numbers("coefficients");
        if (sys.coefficients.size() != 2) {
            throw InvalidArgument("system.coefficients: rotation_scale family takes [scale, angle]");
        }
        const double r = sys.coefficients[0];
        const double c = std::cos(sys.coefficients[1]);
        const double sn = std::sin(sys.coefficients[1]);
        sys.matrix.resize(2, 2);
        sys.matrix << r * c, -r * sn, r * sn, r * c;
    } else if (sys.family == "matrix") {
        sys.matrix = parse_matrix(s.at("matrix"), "system.matrix");
        if (sys.matrix.rows() != sys.matrix.cols()) throw InvalidArgument("system.matrix: must be square");
    } else {
        throw InvalidArgument("system.family: unknown family '" + sys.family +
                              "' (scalar, diagonal, rotation_scale, matrix)");
    }
    if (sys.family != "matrix" && s.has("matrix")) {
        throw InvalidArgument("system.matrix: only allowed for the matrix family");
    }
    if (sys.family == "matrix" && s.has("coefficients")) {
        throw InvalidArgument("system.coefficients: not used by the matrix family");
    }
    sys.dimension = static_cast<int>(sys.matrix.rows());
    if (s.has("dimension") && s.integer("dimension") != sys.dimension) {
        throw InvalidArgument("system.dimension: does not match the coefficients (" + std::to_string(sys.dimension) +
                              ")");
    }
    if (sys.dimension > 5) spdlog::warn("system.dimension = {} exceeds the tested range d <= 5", sys.dimension);
    sys.nonlinearity = s.has("nonlinearity") ? parse_nonlinearity(s.at("nonlinearity"), "system.nonlinearity")
                                             : NonlinearSpec{};
    return sys;
}

RdsSpec parse_rds(const json& j)
{
    const Section s(j, "rds", {"mds", "generators", "nonlinearity", "omega", "spectrum", "norm_check", "two_sided"});
    RdsSpec r;
    const Section mds(s.at("mds"), "rds.mds", {"kind", "probabilities", "angle", "seed"});
    r.mds_kind = mds.string("kind");
    r.mds_seed = mds.seed("seed");
    if (r.mds_kind == "bernoulli") {
        const Section b(s.at("mds"), "rds.mds", {"kind", "probabilities", "seed"});
        r.probabilities = b.numbers("probabilities");
    } else if (r.mds_kind == "rotation") {
        const Section b(s.at("mds"), "rds.mds", {"kind", "angle", "seed"});
        r.angle = b.number("angle");
    } else {
        throw InvalidArgument("rds.mds.kind: unknown base '" + r.mds_kind + "' (bernoulli, rotation)");
    }
    const json& gens = s.at("generators");
    if (!gens.is_array() || gens.empty()) throw InvalidArgument("rds.generators: expected an array of matrices");
    for (std::size_t i = 0; i < gens.size(); ++i) {
        r.generators.push_back(parse_matrix(gens[i], "rds.generators[" + std::to_string(i) + "]"));
        const Mat& g = r.generators.back();
        if (g.rows() != g.cols() || g.rows() != r.generators.front().rows()) {
            throw InvalidArgument("rds.generators: matrices must be square and of one size");
        }
    }
    r.dimension = static_cast<int>(r.generators.front().rows());
    if (r.mds_kind == "bernoulli" && r.generators.size() != r.probabilities.size()) {
        throw InvalidArgument("rds.generators: need one matrix per Bernoulli symbol");
    }
    if (r.mds_kind == "rotation" && r.generators.size() != 2) {
        throw InvalidArgument("rds.generators: rotation base takes [A0, A1] with A = A0 + cos(2 pi x) A1");
    }
    r.nonlinearity =
        s.has("nonlinearity") ? parse_nonlinearity(s.at("nonlinearity"), "rds.nonlinearity") : NonlinearSpec{};
    if (s.has("omega")) {
        const Section o(s.at("omega"), "rds.omega", {"path", "shift"});
        r.omega.path = static_cast<std::uint64_t>(o.count("path", 0, 0));
        r.omega.shift = o.integer("shift", 0);
    }
    if (s.has("spectrum")) {
        const Section sp(s.at("spectrum"), "rds.spectrum", {"n_steps", "n_samples"});
        r.n_steps = sp.count("n_steps", r.n_steps, 2);
        r.n_samples = sp.count("n_samples", r.n_samples, 2);
    }
    if (s.has("norm_check")) {
        const Section nc(s.at("norm_check"), "rds.norm_check", {"t_max", "paths"});
        r.norm_check_t_max = static_cast<Time>(nc.count("t_max", 50, 0));
        r.norm_check_paths = nc.count("paths", 64, 0);
    }
    r.two_sided = s.boolean("two_sided", true);
    return r;
}

json rds_json(const RdsSpec& r)
{
    json mds{{"kind", r.mds_kind}, {"seed", r.mds_seed}};
    if (r.mds_kind == "bernoulli") mds["probabilities"] = r.probabilities;
    else mds["angle"] = r.angle;
    json gens = json::array();
    for (const Mat& g : r.generators) gens.push_back(matrix_json(g));
    return {{"mds", mds},
            {"generators", gens},
            {"nonlinearity", nonlinearity_json(r.nonlinearity)},
            {"omega", {{"path", r.omega.path}, {"shift", r.omega.shift}}},
            {"spectrum", {{"n_steps", r.n_steps}, {"n_samples", r.n_samples}}},
            {"norm_check", {{"t_max", r.norm_check_t_max}, {"paths", r.norm_check_paths}}},
            {"two_sided", r.two_sided}};
}

json config_document(const ExperimentConfig& c)
{
    json j;
    j["schema_version"] = kConfigSchemaVersion;
    if (c.system) {
        json sys{{"family", c.system->family},
                 {"dimension", c.system->dimension},
                 {"nonlinearity", nonlinearity_json(c.system->nonlinearity)}};
        if (c.system->family == "matrix") sys["matrix"] = matrix_json(c.system->matrix);
        else sys["coefficients"] = c.system->coefficients;
        j["system"] = sys;
    }
    if (c.rds) j["rds"] = rds_json(*c.rds);
    if (c.localization) {
        j["localization"] = {{"target_L", c.localization->target_L},
                             {"orbits", c.localization->orbits},
                             {"pairs", c.localization->pairs},
                             {"seed", c.localization->seed},
                             {"tolerance", c.local_tolerance}};
    }
    j["window"] = {{"t_min", c.t_min}, {"t_max", c.t_max}};
    j["norm"] = {{"kind", c.norm.kind}};
    if (c.norm.kind == "constant") j["norm"]["weight"] = matrix_json(c.norm.weight);
    j["sampling"] = {{"seed", c.sampling.seed},
                     {"points", c.sampling.points},
                     {"pairs", c.sampling.pairs},
                     {"radius", c.sampling.radius}};
    j["tolerances"] = {{"solver", c.solver_tolerance},
                       {"max_iterations", c.max_iterations},
                       {"composition", c.composition_tolerance},
                       {"fd", c.fd_tolerance}};
    j["modes"] = {{"smooth", c.smooth}, {"order", c.order}};
    return j;
}

}  // namespace

std::string ExperimentConfig::hash() const { return sha256_hex(config_document(*this).dump()); }

nlohmann::json ExperimentConfig::document() const { return config_document(*this); }

ExperimentConfig parse_config(const json& doc)
{
    const Section top(doc, "config",
                      {"schema_version", "system", "rds", "localization", "window", "norm", "sampling", "tolerances",
                       "modes", "output"});
    ExperimentConfig c;
    if (top.integer("schema_version", kConfigSchemaVersion) != kConfigSchemaVersion) {
        throw InvalidArgument("config.schema_version: this build reads version " +
                              std::to_string(kConfigSchemaVersion));
    }
    if (top.has("system")) c.system = parse_system(top.at("system"));
    if (top.has("rds")) c.rds = parse_rds(top.at("rds"));
    if (!c.system && !c.rds) throw InvalidArgument("config: needs a system or an rds section");
    if (top.has("localization")) {
        if (!c.rds) throw InvalidArgument("config.localization: requires an rds section");
        const Section l(top.at("localization"), "localization", {"target_L", "orbits", "pairs", "seed", "tolerance"});
        LocalizationSpec spec;
        spec.target_L = l.number("target_L", 0.1);
        if (!(spec.target_L > 0.0)) throw InvalidArgument("localization.target_L: must be positive");
        spec.orbits = l.count("orbits", 20);
        spec.pairs = l.count("pairs", 10000);
        spec.seed = l.seed("seed");
        c.local_tolerance = l.number("tolerance", 1e-7);
        c.localization = spec;
    }
    if (top.has("window")) {
        const Section w(top.at("window"), "window", {"t_min", "t_max"});
        c.t_min = w.integer("t_min", 0);
        c.t_max = w.integer("t_max", 100);
    }
    if (c.t_max <= c.t_min) throw InvalidArgument("window: t_max must exceed t_min");
    if (c.rds && c.t_min < 0) throw InvalidArgument("window.t_min: random systems run forward from t = 0");
    if (top.has("norm")) {
        const Section n(top.at("norm"), "norm", {"kind", "weight"});
        c.norm.kind = n.string("kind");
        if (c.norm.kind == "constant") {
            c.norm.weight = parse_matrix(n.at("weight"), "norm.weight");
        } else if (c.norm.kind != "euclidean") {
            throw InvalidArgument("norm.kind: unknown norm '" + c.norm.kind + "' (euclidean, constant)");
        } else if (n.has("weight")) {
            throw InvalidArgument("norm.weight: only allowed for the constant norm");
        }
    }
    {
        const Section s(top.at("sampling"), "sampling", {"seed", "points", "pairs", "radius"});
        c.sampling.seed = s.seed("seed");
        c.sampling.points = s.count("points", 1000, 0);
        c.sampling.pairs = s.count("pairs", 1000, 0);
        c.sampling.radius = s.number("radius", 10.0);
        if (!(c.sampling.radius > 0.0)) throw InvalidArgument("sampling.radius: must be positive");
    }
    if (top.has("tolerances")) {
        const Section t(top.at("tolerances"), "tolerances", {"solver", "max_iterations", "composition", "fd"});
        c.solver_tolerance = t.number("solver", 1e-10);
        c.max_iterations = t.count("max_iterations", 100000);
        c.composition_tolerance = t.number("composition", 1e-8);
        c.fd_tolerance = t.number("fd", 1e-5);
        for (const double x : {c.solver_tolerance, c.composition_tolerance, c.fd_tolerance}) {
            if (!(x > 0.0)) throw InvalidArgument("tolerances: must be positive");
        }
    }
    if (top.has("modes")) {
        const Section m(top.at("modes"), "modes", {"smooth", "order"});
        c.smooth = m.boolean("smooth", false);
        c.order = static_cast<int>(m.count("order", 1));
    }
    if (c.system && c.norm.kind == "constant" && c.norm.weight.rows() != c.system->dimension) {
        throw InvalidArgument("norm.weight: size does not match the system dimension");
    }
    if (top.has("output")) {
        const Section o(top.at("output"), "output", {"dir", "cache_dir"});
        c.out_dir = o.string("dir", "out");
        if (o.has("cache_dir")) c.cache_dir = o.string("cache_dir");
    }
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open config " + path.string());
    json doc;
    try {
        doc = json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw InvalidArgument("config " + path.string() + " is not valid JSON: " + e.what());
    }
    ExperimentConfig c = parse_config(doc);
    const auto base = path.parent_path();
    if (c.out_dir.is_relative() && doc.contains("output")) c.out_dir = base / c.out_dir;
    if (c.cache_dir && c.cache_dir->is_relative()) c.cache_dir = base / *c.cache_dir;
    return c;
}

ExperimentConfig apply_overrides(const ExperimentConfig& config, const Overrides& o)
{
    ExperimentConfig c = config;
    if (o.seed) c.sampling.seed = *o.seed;
    if (o.samples) c.sampling.points = *o.samples;
    if (o.tolerance) {
        if (!(*o.tolerance > 0.0)) throw InvalidArgument("--tol: must be positive");
        c.composition_tolerance = *o.tolerance;
    }
    if (o.out_dir) c.out_dir = *o.out_dir;
    return c;
}

// ---------------------------------------------------------------- systems

namespace {

Nonlinearity make_nonlinearity(const NonlinearSpec& spec, int dim)
{
    if (spec.kind == "none") return Nonlinearity::zero(dim);
    Nonlinearity f;
    f.value = [spec](Time, const Omega&, const Vec& x) -> Vec {
        Vec y(x.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) y(i) = spec.value(x(i));
        return y;
    };
    f.jacobian = [spec](Time, const Omega&, const Vec& x) -> Mat {
        Vec d(x.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) d(i) = spec.derivative(x(i), 1);
        return d.asDiagonal();
    };
    f.derivative = [spec](Time, const Omega&, const Vec& x, std::span<const Vec> dirs) -> Vec {
        const int order = static_cast<int>(dirs.size());
        Vec y(x.size());
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            double prod = spec.derivative(x(i), order);
            for (const Vec& v : dirs) prod *= v(i);
            y(i) = prod;
        }
        return y;
    };
    f.smoothness = 1000;
    f.zero_fixed_point = true;
    return f;
}

}  // namespace

SemilinearSystem build_system(const ExperimentConfig& config)
{
    if (!config.system) throw InvalidArgument("config: this command needs a system section");
    const SystemSpec& spec = *config.system;
    SemilinearSystem sys;
    sys.dim = spec.dimension;
    const Mat A = spec.matrix;
    sys.linear.matrix = [A](Time, const Omega&) { return A; };
    sys.nonlinear = make_nonlinearity(spec.nonlinearity, spec.dimension);
    sys.norms = config.norm.kind == "constant" ? NormFamily::constant(config.norm.weight)
                                               : NormFamily::euclidean(spec.dimension);
    sys.window = TimeWindow(config.t_min, config.t_max);
    sys.validate();
    return sys;
}

RandomSystem build_rds(const RdsSpec& spec)
{
    RandomSystem r;
    r.linear.dim = spec.dimension;
    if (spec.mds_kind == "bernoulli") {
        r.linear.mds = std::make_shared<const ShiftMDS>(ShiftMDS::bernoulli(spec.probabilities, spec.mds_seed));
        r.linear.generator = [gens = spec.generators](const ShiftMDS& m, const Omega& w) {
            return gens[m.symbol(w)];
        };
    } else {
        r.linear.mds = std::make_shared<const ShiftMDS>(ShiftMDS::rotation(spec.angle, spec.mds_seed));
        r.linear.generator = [a0 = spec.generators[0], a1 = spec.generators[1]](const ShiftMDS& m, const Omega& w) {
            return Mat(a0 + std::cos(2.0 * std::numbers::pi * m.phase(w)) * a1);
        };
    }
    if (spec.nonlinearity.kind != "none") {
        const Nonlinearity f = make_nonlinearity(spec.nonlinearity, spec.dimension);
        r.nonlinear = [f](const ShiftMDS&, const Omega& w, const Vec& x) { return f.value(0, w, x); };
        r.jacobian = [f](const ShiftMDS&, const Omega& w, const Vec& x) { return f.jacobian(0, w, x); };
    }
    return r;
}

// ---------------------------------------------------------------- report

bool RunReport::hard_error() const
{
    return std::any_of(failures.begin(), failures.end(), [](const Failure& f) { return !f.condition; });
}

bool RunReport::conditions_met() const
{
    for (const auto& f : failures) {
        if (f.condition) return false;
    }
    for (const auto& s : stages) {
        for (const auto& v : s.verdicts) {
            if (v.enforced && !v.pass) return false;
        }
    }
    return true;
}

int RunReport::exit_code() const
{
    if (hard_error()) return 1;
    return conditions_met() ? 0 : 2;
}

const StageReport* RunReport::stage(const std::string& name) const
{
    for (const auto& s : stages) {
        if (s.name == name) return &s;
    }
    return nullptr;
}

namespace {

json num(double x)
{
    if (std::isfinite(x)) return x;
    if (std::isnan(x)) return "nan";
    return x > 0 ? "inf" : "-inf";
}

double from_num(const json& j)
{
    if (j.is_number()) return j.get<double>();
    const std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    return std::numeric_limits<double>::quiet_NaN();
}

json nums(const std::vector<double>& xs)
{
    json a = json::array();
    for (const double x : xs) a.push_back(num(x));
    return a;
}

std::vector<double> from_nums(const json& j)
{
    std::vector<double> out;
    for (const auto& x : j) out.push_back(from_num(x));
    return out;
}

}  // namespace

void to_json(json& j, const RunReport& r)
{
    j = json::object();
    j["schema_version"] = r.schema_version;
    j["artifact_version"] = r.artifact_version;
    j["config_hash"] = r.config_hash;
    j["command"] = r.command;
    j["stages"] = json::array();
    for (const auto& s : r.stages) {
        json js{{"name", s.name}, {"constants", json::object()}, {"verdicts", json::array()},
                {"residuals", json::array()}, {"notes", s.notes}};
        for (const auto& [k, v] : s.constants) js["constants"][k] = num(v);
        for (const auto& v : s.verdicts) {
            js["verdicts"].push_back({{"name", v.name},
                                      {"pass", v.pass},
                                      {"measured", num(v.measured)},
                                      {"threshold", num(v.threshold)},
                                      {"enforced", v.enforced}});
        }
        for (const auto& res : s.residuals) {
            js["residuals"].push_back(
                {{"name", res.name}, {"max", num(res.max)}, {"mean", num(res.mean)}, {"count", res.count}});
        }
        j["stages"].push_back(std::move(js));
    }
    j["failures"] = json::array();
    for (const auto& f : r.failures) {
        j["failures"].push_back(
            {{"stage", f.stage}, {"type", f.type}, {"message", f.message}, {"condition", f.condition}});
    }
    if (r.spectrum) {
        const SpectrumData& s = *r.spectrum;
        json trace = json::array();
        for (const auto& row : s.trace) trace.push_back(nums(row));
        j["spectrum"] = {{"lambdas", nums(s.lambdas)},         {"multiplicities", s.multiplicities},
                         {"half_widths", nums(s.half_widths)}, {"raw_exponents", nums(s.raw_exponents)},
                         {"gap_parameter", num(s.gap_parameter)}, {"drift", num(s.drift)},
                         {"n_steps", s.n_steps},               {"n_samples", s.n_samples},
                         {"trace_every", s.trace_every},       {"trace", trace}};
    } else {
        j["spectrum"] = nullptr;
    }
    j["samples"] = json::array();
    for (const auto& row : r.samples) {
        j["samples"].push_back({{"stage", row.stage},
                                {"kind", row.kind},
                                {"t", row.t},
                                {"s", row.s},
                                {"point_norm", num(row.point_norm)},
                                {"value", num(row.value)}});
    }
}

void from_json(const json& j, RunReport& r)
{
    r = RunReport{};
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != kReportSchemaVersion) {
        throw InvalidArgument("report schema version " + std::to_string(r.schema_version) + " is not supported");
    }
    r.artifact_version = j.at("artifact_version").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.command = j.at("command").get<std::string>();
    for (const auto& js : j.at("stages")) {
        StageReport s;
        s.name = js.at("name").get<std::string>();
        for (const auto& [k, v] : js.at("constants").items()) s.constants[k] = from_num(v);
        for (const auto& v : js.at("verdicts")) {
            s.verdicts.push_back({v.at("name").get<std::string>(), v.at("pass").get<bool>(),
                                  from_num(v.at("measured")), from_num(v.at("threshold")),
                                  v.at("enforced").get<bool>()});
        }
        for (const auto& res : js.at("residuals")) {
            s.residuals.push_back({res.at("name").get<std::string>(), from_num(res.at("max")),
                                   from_num(res.at("mean")), res.at("count").get<std::size_t>()});
        }
        s.notes = js.at("notes").get<std::vector<std::string>>();
        r.stages.push_back(std::move(s));
    }
    for (const auto& f : j.at("failures")) {
        r.failures.push_back({f.at("stage").get<std::string>(), f.at("type").get<std::string>(),
                              f.at("message").get<std::string>(), f.at("condition").get<bool>()});
    }
    if (!j.at("spectrum").is_null()) {
        const json& js = j.at("spectrum");
        SpectrumData s;
        s.lambdas = from_nums(js.at("lambdas"));
        s.multiplicities = js.at("multiplicities").get<std::vector<int>>();
        s.half_widths = from_nums(js.at("half_widths"));
        s.raw_exponents = from_nums(js.at("raw_exponents"));
        s.gap_parameter = from_num(js.at("gap_parameter"));
        s.drift = from_num(js.at("drift"));
        s.n_steps = js.at("n_steps").get<std::size_t>();
        s.n_samples = js.at("n_samples").get<std::size_t>();
        s.trace_every = js.at("trace_every").get<std::size_t>();
        for (const auto& row : js.at("trace")) s.trace.push_back(from_nums(row));
        r.spectrum = std::move(s);
    }
    for (const auto& row : j.at("samples")) {
        r.samples.push_back({row.at("stage").get<std::string>(), row.at("kind").get<std::string>(),
                             row.at("t").get<Time>(), row.at("s").get<Time>(), from_num(row.at("point_norm")),
                             from_num(row.at("value"))});
    }
}

Command parse_command(const std::string& name)
{
    static const std::map<std::string, Command> names{{"check", Command::check},       {"conjugate", Command::conjugate},
                                                      {"verify", Command::verify},     {"spectrum", Command::spectrum},
                                                      {"localize", Command::localize}, {"report", Command::report}};
    const auto it = names.find(name);
    if (it == names.end()) throw InvalidArgument("unknown command '" + name + "'");
    return it->second;
}

std::string command_name(Command c)
{
    switch (c) {
    case Command::check: return "check";
    case Command::conjugate: return "conjugate";
    case Command::verify: return "verify";
    case Command::spectrum: return "spectrum";
    case Command::localize: return "localize";
    case Command::report: return "report";
    }
    return "unknown";
}

// ---------------------------------------------------------------- cache

Cache::Cache(std::filesystem::path dir, int version) : dir_(std::move(dir)), version_(version)
{
    std::filesystem::create_directories(dir_);
}

std::filesystem::path Cache::path_for(const Key& key) const
{
    return dir_ / (key.kind + "-s" + std::to_string(key.seed) + "-n" + std::to_string(key.length) + "-" +
                   key.params.substr(0, 16) + "-v" + std::to_string(version_) + ".json");
}

json Cache::get_or_create(const Key& key, const std::function<json()>& make)
{
    const auto path = path_for(key);
    const json expected_key{
        {"kind", key.kind}, {"seed", key.seed}, {"length", key.length}, {"params", key.params}, {"version", version_}};
    bool existed = false;
    if (std::filesystem::exists(path)) {
        existed = true;
        std::ifstream in(path, std::ios::binary);
        std::stringstream buf;
        buf << in.rdbuf();
        try {
            const json entry = json::parse(buf.str());
            if (entry.at("key") == expected_key &&
                entry.at("checksum").get<std::string>() == sha256_hex(entry.at("payload").dump())) {
                ++stats_.hits;
                return entry.at("payload");
            }
            spdlog::warn("cache entry {} failed its checksum; regenerating", path.string());
        } catch (const json::exception&) {
            spdlog::warn("cache entry {} is unreadable; regenerating", path.string());
        }
    }
    if (existed) ++stats_.regenerated;
    else ++stats_.misses;
    json payload = make();
    const json entry{{"key", expected_key}, {"checksum", sha256_hex(payload.dump())}, {"payload", payload}};
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write cache entry " + tmp);
        out << entry.dump();
    }
    std::filesystem::rename(tmp, path);
    return payload;
}

json spectrum_to_json(const SpectrumReport& s)
{
    json filtration = json::array();
    for (const Mat& m : s.filtration) filtration.push_back(matrix_json(m));
    json splitting = json::array();
    for (const Mat& m : s.splitting) splitting.push_back(matrix_json(m));
    json trace = json::array();
    for (const auto& row : s.trace) trace.push_back(nums(row));
    return {{"lambdas", nums(s.lambdas)},
            {"multiplicities", s.multiplicities},
            {"half_widths", nums(s.half_widths)},
            {"raw_exponents", nums(s.raw_exponents)},
            {"raw_half_widths", nums(s.raw_half_widths)},
            {"gap_parameter", num(s.gap_parameter)},
            {"n_steps", s.n_steps},
            {"n_samples", s.n_samples},
            {"drift", num(s.drift)},
            {"filtration", filtration},
            {"splitting", splitting},
            {"trace", trace},
            {"trace_every", s.trace_every},
            {"integrability",
             {{"mean_log_plus_A", num(s.integrability.mean_log_plus_A)},
              {"mean_log_plus_A_inv", num(s.integrability.mean_log_plus_A_inv)},
              {"finite", s.integrability.finite}}}};
}

SpectrumReport spectrum_from_json(const json& j)
{
    SpectrumReport s;
    s.lambdas = from_nums(j.at("lambdas"));
    s.multiplicities = j.at("multiplicities").get<std::vector<int>>();
    s.half_widths = from_nums(j.at("half_widths"));
    s.raw_exponents = from_nums(j.at("raw_exponents"));
    s.raw_half_widths = from_nums(j.at("raw_half_widths"));
    s.gap_parameter = from_num(j.at("gap_parameter"));
    s.n_steps = j.at("n_steps").get<std::size_t>();
    s.n_samples = j.at("n_samples").get<std::size_t>();
    s.drift = from_num(j.at("drift"));
    for (const auto& m : j.at("filtration")) s.filtration.push_back(parse_matrix(m, "cache.filtration"));
    for (const auto& m : j.at("splitting")) s.splitting.push_back(parse_matrix(m, "cache.splitting"));
    for (const auto& row : j.at("trace")) s.trace.push_back(from_nums(row));
    s.trace_every = j.at("trace_every").get<std::size_t>();
    const json& integ = j.at("integrability");
    s.integrability.mean_log_plus_A = from_num(integ.at("mean_log_plus_A"));
    s.integrability.mean_log_plus_A_inv = from_num(integ.at("mean_log_plus_A_inv"));
    s.integrability.finite = integ.at("finite").get<bool>();
    return s;
}

// ---------------------------------------------------------------- pipeline

namespace {

Verdict verdict(const ConditionCheck& c, bool enforced = true)
{
    return {c.name, c.pass, c.measured, c.threshold, enforced};
}

Verdict at_most(std::string name, double measured, double threshold, bool enforced = true)
{
    return {std::move(name), measured <= threshold, measured, threshold, enforced};
}

ResidualSummary summary(std::string name, const ResidualStat& s) { return {std::move(name), s.max, s.mean, s.count}; }

struct Context {
    const ExperimentConfig& config;
    RunReport& report;
    std::optional<Cache> cache{};

    std::optional<SemilinearSystem> system{};
    std::optional<GrowthCertificate> growth{};
    std::optional<NonlinearityBounds> bounds{};
    std::shared_ptr<ConjugacySolution> solution{};

    std::optional<RandomSystem> rds{};
    std::optional<SpectrumReport> spectrum{};

    BoundsOptions bounds_options() const
    {
        BoundsOptions b;
        b.sampling = config.sampling;
        b.order = config.smooth ? config.order : 1;
        return b;
    }

    VerifyOptions verify_options() const
    {
        VerifyOptions v;
        v.sampling = config.sampling;
        v.lipschitz_pairs = config.sampling.pairs;
        v.gronwall_pairs = config.sampling.pairs;
        v.composition_tolerance = config.composition_tolerance;
        return v;
    }

    SmoothOptions smooth_options() const
    {
        SmoothOptions s;
        s.sampling = config.sampling;
        s.sampling.points = std::min<std::size_t>(config.sampling.points, 100);
        s.fd_tolerance = config.fd_tolerance;
        return s;
    }
};

/// Runs one stage; a thrown module error becomes a Failure entry and the stage is marked as not completed.
bool guarded(Context& ctx, const std::string& stage, const std::function<void(StageReport&)>& body,
             bool invalid_is_condition = false)
{
    StageReport s;
    s.name = stage;
    const auto fail = [&](const std::string& type, const std::string& message, bool condition) {
        ctx.report.failures.push_back({stage, type, message, condition});
        ctx.report.stages.push_back(std::move(s));
        return false;
    };
    try {
        body(s);
    } catch (const LinearizationRefused& e) {
        for (const auto& c : e.checks) s.verdicts.push_back(verdict(c));
        return fail("LinearizationRefused", e.what(), true);
    } catch (const ContractionViolated& e) {
        s.constants["measured_contraction"] = e.measured;
        return fail("ContractionViolated", e.what(), true);
    } catch (const CertificateError& e) {
        return fail("CertificateError", e.what(), true);
    } catch (const BoundViolated& e) {
        return fail("BoundViolated", e.what(), true);
    } catch (const NotConverged& e) {
        return fail("NotConverged", e.what(), false);
    } catch (const SingularStep& e) {
        return fail("SingularStep", e.what(), false);
    } catch (const NumericalFailure& e) {
        return fail("NumericalFailure", e.what(), false);
    } catch (const InvalidArgument& e) {
        return fail("InvalidArgument", e.what(), invalid_is_condition);
    } catch (const std::exception& e) {
        return fail("Error", e.what(), false);
    }
    ctx.report.stages.push_back(std::move(s));
    return true;
}

bool stage_hypotheses(Context& ctx)
{
    return guarded(ctx, "hypotheses", [&](StageReport& s) {
        ctx.system = build_system(ctx.config);
        const Omega w{};
        ctx.growth = certify_bounded_growth(*ctx.system, w);
        const GrowthCertificate& g = *ctx.growth;
        s.verdicts.push_back(at_most("bounded growth residual <= 0", g.residual, 0.0));
        ctx.bounds = estimate_nonlinearity_bounds(*ctx.system, w, ctx.bounds_options());
        const NonlinearityBounds& b = *ctx.bounds;
        const double inv = max_inverse_step_norm(*ctx.system, w);
        const ConditionReport cond = check_conditions(g, b, inv);
        s.constants["K"] = g.K;
        s.constants["alpha"] = g.alpha;
        s.constants["M"] = b.M;
        s.constants["L"] = b.L;
        for (std::size_t j = 1; j < b.Mj.size(); ++j) s.constants["M" + std::to_string(j)] = b.Mj[j];
        s.constants["max_inverse_norm"] = inv;
        s.constants["q"] = g.K * b.L / (1.0 - g.alpha);
        s.verdicts.push_back(verdict(cond.topological));
        s.verdicts.push_back(verdict(cond.invertibility));
        s.verdicts.push_back(verdict(cond.smooth, ctx.config.smooth));
    });
}

bool stage_conjugacy(Context& ctx)
{
    return guarded(ctx, "conjugacy", [&](StageReport& s) {
        ConjugacyOptions opt;
        opt.solver = {ctx.config.solver_tolerance, ctx.config.max_iterations};
        opt.bounds = ctx.bounds_options();
        ctx.solution = std::make_shared<ConjugacySolution>(*ctx.system, Omega{}, *ctx.growth, *ctx.bounds, opt);
        const ConjugacySolution& sol = *ctx.solution;
        const double bound = sol.near_identity_bound();
        Sampler sampler(ctx.config.sampling.seed);
        ResidualStat h_stat;
        ResidualStat g_stat;
        const int d = ctx.system->dim;
        for (std::size_t i = 0; i < ctx.config.sampling.points; ++i) {
            const Time t = sampler.time(ctx.config.t_min, ctx.config.t_max);
            const Vec xi = sampler.in_ball(d, ctx.config.sampling.radius);
            const double h = ctx.system->norms.norm(sol.H(t, xi) - xi, t, {});
            const double g = ctx.system->norms.norm(sol.G(t, xi) - xi, t, {});
            h_stat.add(h);
            g_stat.add(g);
            ctx.report.samples.push_back({"conjugacy", "near_identity_H", t, t, xi.norm(), h});
            ctx.report.samples.push_back({"conjugacy", "near_identity_G", t, t, xi.norm(), g});
        }
        const ConjugacyDiagnostics diag = sol.diagnostics();
        s.constants["near_identity_bound"] = bound;
        s.constants["q"] = diag.q;
        s.constants["solves"] = static_cast<double>(diag.solves);
        s.constants["max_iterations"] = static_cast<double>(diag.max_iterations);
        s.constants["max_a_posteriori_error"] = diag.max_a_posteriori_error;
        s.residuals.push_back(summary("near_identity_H", h_stat));
        s.residuals.push_back(summary("near_identity_G", g_stat));
        const double limit = bound + ctx.config.composition_tolerance;
        s.verdicts.push_back(at_most("sup |H - id| <= KM/(1-alpha)", h_stat.max, limit));
        s.verdicts.push_back(at_most("sup |G - id| <= KM/(1-alpha)", g_stat.max, limit));
    });
}

void add_verification(Context& ctx, StageReport& s, const VerificationReport& v, const std::string& stage)
{
    const double tol = v.composition_tolerance;
    s.residuals.push_back(summary("conjugation_H", v.conjugation_H));
    s.residuals.push_back(summary("conjugation_G", v.conjugation_G));
    s.residuals.push_back(summary("round_trip_GH", v.round_trip_GH));
    s.residuals.push_back(summary("round_trip_HG", v.round_trip_HG));
    s.residuals.push_back(summary("near_identity_H", v.near_identity_H));
    s.residuals.push_back(summary("near_identity_G", v.near_identity_G));
    s.residuals.push_back(summary("gronwall_ratio", v.gronwall_ratio));
    s.constants["near_identity_bound"] = v.near_identity_bound;
    s.verdicts.push_back(at_most("conjugation residual of H", v.conjugation_H.max, tol));
    s.verdicts.push_back(at_most("conjugation residual of G", v.conjugation_G.max, tol));
    s.verdicts.push_back(at_most("round trip G(H)", v.round_trip_GH.max, tol));
    s.verdicts.push_back(at_most("round trip H(G)", v.round_trip_HG.max, tol));
    s.verdicts.push_back(at_most("near identity of H", v.near_identity_H.max, v.near_identity_bound + tol));
    s.verdicts.push_back(at_most("near identity of G", v.near_identity_G.max, v.near_identity_bound + tol));
    s.verdicts.push_back(at_most("growth estimate violations", static_cast<double>(v.gronwall_violations), 0.0));
    for (const auto& l : v.lipschitz) {
        s.verdicts.push_back({"Lipschitz " + l.name, l.holds, l.empirical, l.formula, false});
    }
    for (const auto& row : v.samples) {
        ctx.report.samples.push_back({stage, row.kind, row.t, row.s, row.point_norm, row.residual});
    }
}

void add_smoothness(Context& ctx, StageReport& s, const SmoothnessReport& r, const std::string& stage)
{
    for (const auto& o : r.orders) {
        const std::string k = std::to_string(o.order);
        if (o.order == 1) {
            s.verdicts.push_back(at_most("D2G vs finite differences (relative)", o.max_fd_error,
                                         ctx.config.fd_tolerance));
        }
        s.constants["order" + k + "_median_richardson"] = o.median_richardson;
        s.constants["order" + k + "_continuity_modulus"] = o.continuity_modulus;
        s.verdicts.push_back({"order " + k + " consistency", o.consistent,
                              static_cast<double>(o.fd_failures + o.richardson_failures),
                              0.0, true});
    }
    s.verdicts.push_back(verdict(r.smooth_condition));
    s.verdicts.push_back(at_most("|D2G - I| <= KM1/(1-alpha)", r.max_deviation, r.deviation_bound, false));
    s.verdicts.push_back(at_most("variational bound violations", static_cast<double>(r.variational_violations), 0.0));
    s.constants["invertibility_margin"] = r.invertibility_margin;
    s.constants["chain_rule_residual"] = r.chain_rule_residual;
    s.constants["variational_worst_ratio"] = r.variational_worst_ratio;
    for (const auto& f : r.failures) s.notes.push_back(f);
    for (const auto& row : r.samples) {
        ctx.report.samples.push_back({stage, "fd_error", row.t, row.t, row.point_norm, row.fd_error});
        ctx.report.samples.push_back({stage, "deviation", row.t, row.t, row.point_norm, row.deviation});
    }
}

bool stage_verification(Context& ctx)
{
    return guarded(ctx, "verification", [&](StageReport& s) {
        if (!ctx.solution) {
            ConjugacyOptions opt;
            opt.solver = {ctx.config.solver_tolerance, ctx.config.max_iterations};
            opt.bounds = ctx.bounds_options();
            ctx.solution = std::make_shared<ConjugacySolution>(*ctx.system, Omega{}, *ctx.growth, *ctx.bounds, opt);
        }
        add_verification(ctx, s, verify_conjugacy(*ctx.solution, ctx.verify_options()), "verification");
        if (ctx.config.smooth) {
            add_smoothness(ctx, s, smoothness_report(*ctx.solution, ctx.config.order, ctx.smooth_options()),
                           "verification");
        }
    });
}

SpectrumReport compute_spectrum(Context& ctx)
{
    const RdsSpec& spec = *ctx.config.rds;
    SpectrumOptions opt;
    opt.n_steps = spec.n_steps;
    opt.n_samples = spec.n_samples;
    const auto compute = [&] { return lyapunov_spectrum(ctx.rds->linear, opt); };
    if (!ctx.cache) return compute();
    json params{{"generators", rds_json(spec).at("generators")},
                {"mds", rds_json(spec).at("mds")},
                {"n_samples", spec.n_samples}};
    const Cache::Key key{"spectrum-" + spec.mds_kind, spec.mds_seed, spec.n_steps, sha256_hex(params.dump())};
    return spectrum_from_json(ctx.cache->get_or_create(key, [&] { return spectrum_to_json(compute()); }));
}

/// Stores the base stream over the window for every checked path and compares it with the live stream.
double check_omega_stream(Context& ctx)
{
    const RdsSpec& spec = *ctx.config.rds;
    const ShiftMDS& mds = *ctx.rds->linear.mds;
    const std::size_t length = static_cast<std::size_t>(ctx.config.t_max - ctx.config.t_min + 1);
    const std::size_t paths = std::max<std::size_t>(spec.norm_check_paths, spec.omega.path + 1);
    const auto live = [&] {
        json rows = json::array();
        for (std::size_t p = 0; p < paths; ++p) rows.push_back(mds.window(p, ctx.config.t_min, length));
        return rows;
    };
    if (!ctx.cache) return 0.0;
    json params{{"mds", rds_json(spec).at("mds")}, {"paths", paths}, {"t_min", ctx.config.t_min}};
    const Cache::Key key{"omega-" + spec.mds_kind, spec.mds_seed, length, sha256_hex(params.dump())};
    const json cached = ctx.cache->get_or_create(key, live);
    const json fresh = live();
    double worst = 0.0;
    for (std::size_t p = 0; p < paths; ++p) {
        for (std::size_t i = 0; i < length; ++i) {
            worst = std::max(worst, std::abs(cached[p][i].get<double>() - fresh[p][i].get<double>()));
        }
    }
    return worst;
}

bool stage_spectrum(Context& ctx)
{
    return guarded(ctx, "spectrum", [&](StageReport& s) {
        const RdsSpec& spec = *ctx.config.rds;
        ctx.rds = build_rds(spec);
        if (ctx.cache) s.verdicts.push_back(at_most("cached base stream matches", check_omega_stream(ctx), 0.0));
        ctx.spectrum = compute_spectrum(ctx);
        const SpectrumReport& sp = *ctx.spectrum;
        for (std::size_t i = 0; i < sp.lambdas.size(); ++i) {
            s.constants["lambda_" + std::to_string(i + 1)] = sp.lambdas[i];
            s.constants["half_width_" + std::to_string(i + 1)] = sp.half_widths[i];
            s.constants["multiplicity_" + std::to_string(i + 1)] = sp.multiplicities[i];
        }
        s.constants["gap_parameter"] = sp.gap_parameter;
        s.constants["drift"] = sp.drift;
        s.constants["mean_log_plus_A"] = sp.integrability.mean_log_plus_A;
        s.constants["mean_log_plus_A_inv"] = sp.integrability.mean_log_plus_A_inv;
        s.verdicts.push_back({"log+ integrability", sp.integrability.finite,
                              std::max(sp.integrability.mean_log_plus_A, sp.integrability.mean_log_plus_A_inv),
                              std::numeric_limits<double>::infinity(), true});
        s.verdicts.push_back({"lambda_1 + a < 0", sp.lambdas.front() + sp.gap_parameter < 0.0,
                              sp.lambdas.front() + sp.gap_parameter, 0.0, false});
        SpectrumData data;
        data.lambdas = sp.lambdas;
        data.multiplicities = sp.multiplicities;
        data.half_widths = sp.half_widths;
        data.raw_exponents = sp.raw_exponents;
        data.gap_parameter = sp.gap_parameter;
        data.drift = sp.drift;
        data.n_steps = sp.n_steps;
        data.n_samples = sp.n_samples;
        data.trace_every = sp.trace_every;
        data.trace = sp.trace;
        ctx.report.spectrum = std::move(data);

        if (spec.norm_check_paths == 0) return;
        RandomNormOptions norm_opt;
        norm_opt.two_sided = spec.two_sided;
        std::size_t violations = 0;
        double tail = 0.0;
        double epsilon = 0.0;
        double worst_upper = 0.0;
        double worst_lower = 0.0;
        for (std::size_t p = 0; p < spec.norm_check_paths; ++p) {
            const Omega w{p, 0};
            const RandomNorm norm(ctx.rds->linear, sp, w, 0, spec.norm_check_t_max + 1, norm_opt);
            const RandomEstCheck check = check_random_est(norm, sp, spec.norm_check_t_max, norm_opt.tail_tolerance);
            violations += check.violations;
            tail = std::max(tail, norm.tail_bound());
            epsilon = std::max(epsilon, estimate_epsilon(norm));
            for (std::size_t i = 0; i < check.worst_upper.size(); ++i) {
                worst_upper = std::max(worst_upper, check.worst_upper[i]);
                worst_lower = std::max(worst_lower, check.worst_lower[i]);
                ctx.report.samples.push_back(
                    {"spectrum", "sandwich_upper", static_cast<Time>(i), static_cast<Time>(p), 0.0,
                     check.worst_upper[i]});
                ctx.report.samples.push_back(
                    {"spectrum", "sandwich_lower", static_cast<Time>(i), static_cast<Time>(p), 0.0,
                     check.worst_lower[i]});
            }
        }
        s.constants["epsilon_estimate"] = epsilon;
        s.constants["sandwich_worst_upper"] = worst_upper;
        s.constants["sandwich_worst_lower"] = worst_lower;
        s.verdicts.push_back(at_most("adapted norm tail bound", tail, norm_opt.tail_tolerance));
        s.verdicts.push_back(at_most("adapted norm sandwich violations", static_cast<double>(violations), 0.0));
    });
}

RdsOptions rds_options(const Context& ctx)
{
    RdsOptions opt;
    opt.bounds = ctx.bounds_options();
    opt.norm.two_sided = ctx.config.rds->two_sided;
    opt.verify = ctx.verify_options();
    opt.solver.max_iterations = ctx.config.max_iterations;
    opt.smooth = ctx.config.smooth;
    opt.smooth_options = ctx.smooth_options();
    return opt;
}

bool stage_rds_linearization(Context& ctx)
{
    return guarded(ctx, "rds_linearization", [&](StageReport& s) {
        const RdsSpec& spec = *ctx.config.rds;
        const TimeWindow window(ctx.config.t_min, ctx.config.t_max);
        const RdsLinearization lin = rds_linearize(*ctx.rds, *ctx.spectrum, spec.omega, window, rds_options(ctx));
        for (const auto& c : lin.checks) s.verdicts.push_back(verdict(c));
        s.constants["alpha"] = lin.alpha;
        s.constants["M"] = lin.solution->bounds().M;
        s.constants["L"] = lin.solution->bounds().L;
        s.constants["horizon"] = static_cast<double>(lin.norm->horizon());
        s.constants["tail_bound"] = lin.norm->tail_bound();
        s.constants["growth_worst_ratio"] = lin.growth_worst_ratio;
        s.verdicts.push_back(at_most("adapted growth ratio <= 1 (+1e-9 roundoff)", lin.growth_worst_ratio, 1.0 + 1e-9));
        add_verification(ctx, s, lin.verification, "rds_linearization");
        if (lin.smoothness) add_smoothness(ctx, s, *lin.smoothness, "rds_linearization");
    });
}

void persist_cutoff_table(const Context& ctx, const CutoffSystem& cut)
{
    if (!ctx.cache) return;
    json table = json::array();
    for (const auto& [w, sigma] : cut.table()) table.push_back({{"path", w.path}, {"shift", w.shift}, {"sigma", sigma}});
    const json doc{{"target_L", cut.target_L()},
                   {"fallback", cut.fallback()},
                   {"rds", sha256_hex(rds_json(*ctx.config.rds).dump())},
                   {"table", table}};
    const auto path = ctx.cache->dir() / ("cutoff-" + ctx.config.hash().substr(0, 16) + ".json");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write cutoff table " + path.string());
    out << doc.dump(2) << '\n';
}

bool stage_localization(Context& ctx)
{
    return guarded(
        ctx, "localization",
        [&](StageReport& s) {
            const RdsSpec& spec = *ctx.config.rds;
            const LocalizationSpec& loc = *ctx.config.localization;
            const TimeWindow window(ctx.config.t_min, ctx.config.t_max);
            RandomNormOptions norm_opt;
            norm_opt.two_sided = spec.two_sided;
            auto norm = std::make_shared<RandomNorm>(ctx.rds->linear, *ctx.spectrum, spec.omega, window.t_min(),
                                                     window.t_max() + 1, norm_opt);
            std::vector<Omega> points;
            for (Time t = window.t_min(); t <= window.t_max(); ++t) points.push_back(spec.omega.shifted(t));
            CutoffOptions cut_opt;
            cut_opt.target_L = loc.target_L;
            cut_opt.seed = loc.seed;
            const CutoffSystem cut = cutoff_nonlinearity(*ctx.rds, points, random_norm_weight(norm), cut_opt);
            persist_cutoff_table(ctx, cut);
            const CutoffCheck check = verify_cutoff(cut, spec.omega, loc.pairs, loc.seed);
            s.constants["sigma_min"] = cut.fallback();
            s.constants["sigma_at_omega"] = cut.sigma(spec.omega);
            s.constants["cutoff_lipschitz"] = check.lipschitz;
            s.constants["cutoff_sup"] = check.sup;
            s.verdicts.push_back(at_most("cutoff Lipschitz <= target_L (1+1e-6)", check.lipschitz,
                                         loc.target_L * (1 + 1e-6)));
            s.verdicts.push_back(at_most("cutoff sup <= 1", check.sup, 1.0));
            s.verdicts.push_back({"cutoff equals F inside U", check.agrees_inside, check.agrees_inside ? 0.0 : 1.0,
                                  0.0, true});

            LocalOptions opt;
            opt.rds = rds_options(ctx);
            opt.rds.precomputed_norm = norm;
            opt.mode = ctx.config.smooth ? LocalMode::smooth : LocalMode::topological;
            opt.orbits = loc.orbits;
            opt.seed = loc.seed;
            opt.tolerance = ctx.config.local_tolerance;
            const LocalReport rep = local_linearize(cut, *ctx.spectrum, spec.omega, window, opt);
            for (const auto& c : rep.global.checks) s.verdicts.push_back(verdict(c));
            s.constants["alpha"] = rep.global.alpha;
            s.constants["compared_steps"] = static_cast<double>(rep.compared_steps);
            s.constants["max_residual_after_escape"] = rep.max_residual_after;
            s.verdicts.push_back({"psi equals truncated psi up to escape", rep.identical, rep.identical ? 0.0 : 1.0,
                                  0.0, true});
            s.verdicts.push_back(at_most("local conjugation residual", rep.max_residual, rep.tolerance));
            for (const auto& o : rep.orbits) {
                ctx.report.samples.push_back({"localization", "local_residual", o.escape,
                                              o.reached_cap ? 1 : 0, o.start_norm, o.residual});
            }
            if (rep.global.smoothness) add_smoothness(ctx, s, *rep.global.smoothness, "localization");
        },
        true);
}

}  // namespace

RunReport run(const ExperimentConfig& config, Command command)
{
    RunReport report;
    report.artifact_version = artifact_version();
    report.config_hash = config.hash();
    report.command = command_name(command);
    Context ctx{config, report};
    if (config.cache_dir) ctx.cache.emplace(*config.cache_dir);

    const bool want_system = config.system.has_value() && command != Command::spectrum && command != Command::localize;
    const bool want_rds = config.rds.has_value();
    if (command == Command::spectrum && !want_rds) throw InvalidArgument("spectrum: config has no rds section");
    if (command == Command::localize && !(want_rds && config.localization)) {
        throw InvalidArgument("localize: config needs rds and localization sections");
    }

    if (want_system && stage_hypotheses(ctx)) {
        switch (command) {
        case Command::check: break;
        case Command::conjugate: stage_conjugacy(ctx); break;
        case Command::verify: stage_verification(ctx); break;
        case Command::report:
            if (stage_conjugacy(ctx)) stage_verification(ctx);
            break;
        default: break;
        }
    }
    if (want_rds && stage_spectrum(ctx)) {
        const bool linearize = command == Command::conjugate || command == Command::verify ||
                               (command == Command::report && !config.localization);
        if (linearize) stage_rds_linearization(ctx);
        if (config.localization && (command == Command::localize || command == Command::report)) {
            stage_localization(ctx);
        }
    }
    return report;
}

// ---------------------------------------------------------------- emission

std::string report_json(const RunReport& report)
{
    json j = report;
    return j.dump(2) + "\n";
}

namespace {

std::string fmt(double x)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("failed writing " + path.string());
}

}  // namespace

std::string samples_csv(const RunReport& report)
{
    std::string out = "stage,kind,t,s,point_norm,value\n";
    for (const auto& r : report.samples) {
        out += r.stage + ',' + r.kind + ',' + std::to_string(r.t) + ',' + std::to_string(r.s) + ',' +
               fmt(r.point_norm) + ',' + fmt(r.value) + '\n';
    }
    return out;
}

std::string traces_csv(const RunReport& report)
{
    std::string out = "step";
    if (!report.spectrum) return out + '\n';
    const SpectrumData& s = *report.spectrum;
    const std::size_t d = s.raw_exponents.size();
    for (std::size_t i = 0; i < d; ++i) out += ",lambda_" + std::to_string(i + 1);
    out += '\n';
    for (std::size_t k = 0; k < s.trace.size(); ++k) {
        out += std::to_string((k + 1) * s.trace_every);
        for (const double x : s.trace[k]) out += ',' + fmt(x);
        out += '\n';
    }
    return out;
}

EmittedFiles emit(const RunReport& report, const std::filesystem::path& dir)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error("cannot create output directory " + dir.string() + ": " + ec.message());
    EmittedFiles files{dir / "report.json", dir / "samples.csv", dir / "traces.csv"};
    write_file(files.json, report_json(report));
    write_file(files.samples_csv, samples_csv(report));
    write_file(files.traces_csv, traces_csv(report));
    return files;
}

}  // namespace conjlab
