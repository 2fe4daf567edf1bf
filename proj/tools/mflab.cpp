// Experiment runner for mean-field particle-flow training of two-layer
// ReLU networks: integrates the coupled neuron ODE, audits conserved
// quantities and moment bounds, and emits convergence diagnostics.
//
//   mflab run <config>         full experiment -> trajectory/report/verdict
//   mflab check <config>       invariant suite, exit 3 on any failure
//   mflab admissible <config>  data-regularity delta sweep
//   mflab sard <config>        sphere-geometry probe of the potential
//   mflab sweep <config>       cartesian product over [sweep] axes

#include <CLI11.hpp>

#include <iostream>

#include "mflab/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"mean-field particle flow laboratory"};
    app.require_subcommand(1);

    std::string config_path;
    mflab::CliOptions opt;
    std::uint64_t seed_override = 0;
    bool has_seed = false;

    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("config", config_path, "experiment config file")->required();
        sub->add_option("--seed-override", seed_override,
                        "replace data/init/grid seeds with s, s+1, s+2")
            ->each([&](const std::string&) { has_seed = true; });
        sub->add_option("--threads", opt.threads, "worker threads (default 1)");
        sub->add_option("--perturb-gradient", opt.perturb_gradient,
                        "test harness: inject a radial velocity defect of this size");
        return sub;
    };

    auto* run = add_common(app.add_subcommand("run", "run one experiment"));
    auto* check = add_common(app.add_subcommand("check", "run the invariant suite"));
    auto* adm = add_common(app.add_subcommand("admissible", "data admissibility sweep"));
    auto* sard = add_common(app.add_subcommand("sard", "sphere-geometry probe"));
    sard->add_option("--ensemble", opt.ensemble_file, "probe a saved ensemble CSV");
    auto* sweep = add_common(app.add_subcommand("sweep", "cartesian parameter sweep"));

    CLI11_PARSE(app, argc, argv);
    if (has_seed) opt.seed_override = seed_override;

    try {
        const mflab::ConfigFile cfg = mflab::ConfigFile::parse(config_path);
        if (run->parsed()) return mflab::cmd_run(cfg, opt);
        if (check->parsed()) return mflab::cmd_check(cfg, opt);
        if (adm->parsed()) return mflab::cmd_admissible(cfg, opt);
        if (sard->parsed()) return mflab::cmd_sard(cfg, opt);
        if (sweep->parsed()) return mflab::cmd_sweep(cfg, opt);
    } catch (const mflab::FlowAbort& e) {
        std::cerr << "aborted: " << e.what() << "\n";
        return 2;
    } catch (const mflab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
