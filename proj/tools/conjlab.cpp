#include "conjlab/harness.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <iostream>

namespace {

struct Args {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> samples;
    std::optional<double> tol;
    bool quiet = false;
};

void print_summary(const conjlab::RunReport& report)
{
    for (const auto& stage : report.stages) {
        std::printf("[%s]\n", stage.name.c_str());
        for (const auto& v : stage.verdicts) {
            std::printf("  %-4s %-48s measured %.6g threshold %.6g%s\n", v.pass ? "ok" : "FAIL", v.name.c_str(),
                        v.measured, v.threshold, v.enforced ? "" : " (reported only)");
        }
    }
    for (const auto& f : report.failures) {
        std::printf("%s in %s: %s\n", f.condition ? "condition failure" : "error", f.stage.c_str(),
                    f.message.c_str());
    }
}

int execute(conjlab::Command command, const Args& args)
{
    conjlab::Overrides o;
    o.seed = args.seed;
    o.samples = args.samples;
    o.tolerance = args.tol;
    if (!args.out.empty()) o.out_dir = args.out;
    const conjlab::ExperimentConfig config = conjlab::apply_overrides(conjlab::load_config(args.config), o);
    const conjlab::RunReport report = conjlab::run(config, command);
    const conjlab::EmittedFiles files = conjlab::emit(report, config.out_dir);
    if (!args.quiet) {
        print_summary(report);
        std::printf("report written to %s\n", files.json.string().c_str());
    }
    return report.exit_code();
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"conjlab: conjugacies linearizing nonautonomous and random difference equations"};
    app.require_subcommand(1);
    app.set_version_flag("--version", conjlab::artifact_version());

    Args args;
    const std::vector<std::pair<std::string, std::string>> commands{
        {"check", "certify the hypotheses and smallness conditions"},
        {"conjugate", "construct H and G (or h) and measure their distance to the identity"},
        {"verify", "construct and verify conjugation, round trips, Lipschitz and growth bounds"},
        {"spectrum", "estimate the Lyapunov spectrum and check the adapted random norm"},
        {"localize", "cut off a local nonlinearity and verify the local linearization"},
        {"report", "run every stage the config supports"}};
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", args.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", args.out, "output directory (overrides output.dir)");
        sub->add_option("--seed", args.seed, "sampling seed (overrides sampling.seed)");
        sub->add_option("--samples", args.samples, "sample count (overrides sampling.points)");
        sub->add_option("--tol", args.tol, "composition tolerance (overrides tolerances.composition)");
        sub->add_flag("-q,--quiet", args.quiet, "print nothing but errors");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const std::string name = app.get_subcommands().front()->get_name();
        return execute(conjlab::parse_command(name), args);
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
}
