#pragma once

// Experiment plumbing: config ingestion, the stage pipeline behind the CLI
// subcommands, JSON/CSV emission and the on-disk cache of ω-streams and spectra.

#include "conjlab/localization.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace conjlab {

inline constexpr int kReportSchemaVersion = 1;
inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kCacheVersion = 1;

[[nodiscard]] std::string artifact_version();
[[nodiscard]] std::string sha256_hex(const std::string& data);

/// Componentwise F_i(x) = Σ c_p x_i^p (polynomial) or c sin(k x_i) (trig).
struct NonlinearSpec {
    std::string kind = "none";
    double coefficient = 0.0;
    double frequency = 1.0;
    std::vector<std::pair<int, double>> terms;

    [[nodiscard]] double value(double x) const;
    /// j-th derivative of the scalar profile.
    [[nodiscard]] double derivative(double x, int order) const;
};

struct SystemSpec {
    std::string family;
    int dimension = 1;
    std::vector<double> coefficients;
    Mat matrix;
    NonlinearSpec nonlinearity;
};

struct NormSpec {
    std::string kind = "euclidean";
    Mat weight;
};

struct RdsSpec {
    std::string mds_kind;
    std::vector<double> probabilities;
    double angle = 0.0;
    std::uint64_t mds_seed = 0;
    std::vector<Mat> generators;
    NonlinearSpec nonlinearity;
    Omega omega;
    std::size_t n_steps = 10000;
    std::size_t n_samples = 64;
    Time norm_check_t_max = 50;
    std::size_t norm_check_paths = 64;
    bool two_sided = true;
    int dimension = 1;
};

struct LocalizationSpec {
    double target_L = 0.1;
    std::size_t orbits = 20;
    std::size_t pairs = 10000;
    std::uint64_t seed = 17;
};

struct ExperimentConfig {
    std::optional<SystemSpec> system;
    std::optional<RdsSpec> rds;
    std::optional<LocalizationSpec> localization;
    Time t_min = 0;
    Time t_max = 100;
    NormSpec norm;
    SamplingSpec sampling;
    double solver_tolerance = 1e-10;
    std::size_t max_iterations = 100000;
    double composition_tolerance = 1e-8;
    double fd_tolerance = 1e-5;
    bool smooth = false;
    int order = 1;
    std::filesystem::path out_dir = "out";
    std::optional<std::filesystem::path> cache_dir;
    double local_tolerance = 1e-7;

    /// The validated document with every default filled in, without the output section.
    [[nodiscard]] nlohmann::json document() const;
    /// SHA-256 of document().
    [[nodiscard]] std::string hash() const;
};

/// Validates the document against the schema; unknown keys, missing seeds and
/// ill-typed values throw InvalidArgument naming the offending key.
[[nodiscard]] ExperimentConfig parse_config(const nlohmann::json& doc);
[[nodiscard]] ExperimentConfig load_config(const std::filesystem::path& path);

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> samples;
    std::optional<double> tolerance;
    std::optional<std::filesystem::path> out_dir;
};

/// Flags replace config scalars: seed → sampling.seed, samples → sampling.points,
/// tol → tolerances.composition.
[[nodiscard]] ExperimentConfig apply_overrides(const ExperimentConfig& config, const Overrides& overrides);

[[nodiscard]] SemilinearSystem build_system(const ExperimentConfig& config);
[[nodiscard]] RandomSystem build_rds(const RdsSpec& spec);

struct Verdict {
    std::string name;
    bool pass = false;
    double measured = 0.0;
    double threshold = 0.0;
    /// Enforced verdicts decide the exit code; the others are reported only.
    bool enforced = true;

    friend bool operator==(const Verdict&, const Verdict&) = default;
};

struct ResidualSummary {
    std::string name;
    double max = 0.0;
    double mean = 0.0;
    std::size_t count = 0;

    friend bool operator==(const ResidualSummary&, const ResidualSummary&) = default;
};

struct StageReport {
    std::string name;
    std::map<std::string, double> constants;
    std::vector<Verdict> verdicts;
    std::vector<ResidualSummary> residuals;
    std::vector<std::string> notes;

    friend bool operator==(const StageReport&, const StageReport&) = default;
};

/// A stage that stopped. Condition failures are refusals by a module
/// because a hypothesis does not hold; everything else is a hard error.
struct Failure {
    std::string stage;
    std::string type;
    std::string message;
    bool condition = false;

    friend bool operator==(const Failure&, const Failure&) = default;
};

struct SampleRow {
    std::string stage;
    std::string kind;
    Time t = 0;
    Time s = 0;
    double point_norm = 0.0;
    double value = 0.0;

    friend bool operator==(const SampleRow&, const SampleRow&) = default;
};

struct SpectrumData {
    std::vector<double> lambdas;
    std::vector<int> multiplicities;
    std::vector<double> half_widths;
    std::vector<double> raw_exponents;
    double gap_parameter = 0.0;
    double drift = 0.0;
    std::size_t n_steps = 0;
    std::size_t n_samples = 0;
    std::size_t trace_every = 0;
    std::vector<std::vector<double>> trace;

    friend bool operator==(const SpectrumData&, const SpectrumData&) = default;
};

struct RunReport {
    int schema_version = kReportSchemaVersion;
    std::string artifact_version;
    std::string config_hash;
    std::string command;
    std::vector<StageReport> stages;
    std::vector<Failure> failures;
    std::optional<SpectrumData> spectrum;
    std::vector<SampleRow> samples;

    [[nodiscard]] bool hard_error() const;
    [[nodiscard]] bool conditions_met() const;
    /// 0 success, 1 hard error, 2 condition failure.
    [[nodiscard]] int exit_code() const;
    [[nodiscard]] const StageReport* stage(const std::string& name) const;

    friend bool operator==(const RunReport&, const RunReport&) = default;
};

void to_json(nlohmann::json& j, const RunReport& r);
void from_json(const nlohmann::json& j, RunReport& r);

enum class Command { check, conjugate, verify, spectrum, localize, report };

[[nodiscard]] Command parse_command(const std::string& name);
[[nodiscard]] std::string command_name(Command c);

/// Content-addressed JSON store. Entries carry their key and a SHA-256 of the
/// payload; unreadable, mismatched or truncated entries are rebuilt.
class Cache {
public:
    struct Key {
        std::string kind;
        std::uint64_t seed = 0;
        std::size_t length = 0;
        /// Digest of every other input the payload depends on.
        std::string params;
    };

    struct Stats {
        std::size_t hits = 0;
        std::size_t misses = 0;
        std::size_t regenerated = 0;
    };

    explicit Cache(std::filesystem::path dir, int version = kCacheVersion);

    [[nodiscard]] std::filesystem::path path_for(const Key& key) const;
    [[nodiscard]] nlohmann::json get_or_create(const Key& key, const std::function<nlohmann::json()>& make);
    [[nodiscard]] const Stats& stats() const { return stats_; }
    [[nodiscard]] const std::filesystem::path& dir() const { return dir_; }

private:
    std::filesystem::path dir_;
    int version_;
    Stats stats_;
};

[[nodiscard]] nlohmann::json spectrum_to_json(const SpectrumReport& s);
[[nodiscard]] SpectrumReport spectrum_from_json(const nlohmann::json& j);

/// Runs the stages of `command`. Module refusals become Failure entries;
/// InvalidArgument for a missing config section propagates.
[[nodiscard]] RunReport run(const ExperimentConfig& config, Command command);

struct EmittedFiles {
    std::filesystem::path json;
    std::filesystem::path samples_csv;
    std::filesystem::path traces_csv;
};

/// Writes report.json, samples.csv and traces.csv into `dir`.
EmittedFiles emit(const RunReport& report, const std::filesystem::path& dir);
[[nodiscard]] std::string report_json(const RunReport& report);
[[nodiscard]] std::string samples_csv(const RunReport& report);
[[nodiscard]] std::string traces_csv(const RunReport& report);

}  // namespace conjlab
