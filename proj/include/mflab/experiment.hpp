#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "mflab/checks.hpp"
#include "mflab/config.hpp"
#include "mflab/diagnostics.hpp"
#include "mflab/flow.hpp"

namespace mflab {

struct CliOptions {
    std::optional<std::uint64_t> seed_override;
    int threads = 1;
    double perturb_gradient = 0.0;
    std::string ensemble_file;  // sard: probe a saved final state
    bool respect_env_out = true;  // sweep cells keep their per-cell directory
};

namespace detail {

inline void apply_overrides(Experiment& ex, const CliOptions& opt) {
    if (opt.respect_env_out) {
        const char* env = std::getenv("MFLAB_OUT");
        if (env && *env) ex.out_dir = env;
    }
    if (opt.seed_override) {
        ex.data.seed = *opt.seed_override;
        ex.init_seed = *opt.seed_override + 1;
        ex.grid_seed = *opt.seed_override + 2;
    }
    ex.flow.threads = opt.threads;
    ex.flow.perturb_gradient = opt.perturb_gradient;
}

inline void write_verdict(const std::string& dir, ConvergenceReport::Verdict v) {
    std::ofstream out(dir + "/verdict.txt");
    out << "verdict=" << ConvergenceReport::name(v) << "\n";
}

}  // namespace detail

inline int cmd_run(const ConfigFile& cfg, const CliOptions& opt, std::ostream& log = std::cout) {
    Experiment ex = build_experiment(cfg);
    detail::apply_overrides(ex, opt);
    std::filesystem::create_directories(ex.out_dir);

    const Ensemble e0 = ex.make_ensemble();
    const std::vector<double> grid = ex.make_grid();

    double mbr = std::numeric_limits<double>::quiet_NaN();
    double mbr_se = std::numeric_limits<double>::quiet_NaN();
    try {
        const MbrEstimate est = mbr_estimate(ex.loss, ex.data, ex.mbr_samples);
        mbr = est.value;
        mbr_se = est.stderr_;
    } catch (const std::exception& e) {
        log << "mbr oracle unavailable: " << e.what() << "\n";
    }

    RunResult rr = [&] {
        try {
            return run(e0, ex.flow, ex.data, ex.loss, ex.activation, grid);
        } catch (const FlowAbort& abort) {
            std::ofstream out(ex.out_dir + "/abort.txt");
            out << abort.what() << "\n";
            log << "aborted: " << abort.what() << "\n";
            throw;
        }
    }();

    rr.record.save_csv(ex.out_dir + "/trajectory.csv");
    const ConvergenceReport rep = convergence_report(rr.record, mbr, mbr_se);
    rep.save_csv(ex.out_dir + "/report.csv");
    detail::write_verdict(ex.out_dir, rep.verdict);
    rr.final_state.save_csv(ex.out_dir + "/ensemble_final.csv");

    log << "risk " << rr.record.risk.front() << " -> " << rep.final_risk << " (mbr " << mbr
        << " +- " << mbr_se << ")\n"
        << "verdict=" << ConvergenceReport::name(rep.verdict) << "\n";
    return 0;
}

inline int cmd_check(const ConfigFile&, const CliOptions& opt, std::ostream& log = std::cout) {
    const auto results = run_invariant_suite(opt.perturb_gradient, opt.threads);
    std::size_t failed = 0;
    for (const auto& r : results) {
        log << (r.pass ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ")\n";
        failed += r.pass ? 0 : 1;
    }
    log << results.size() - failed << "/" << results.size() << " invariants pass\n";
    return failed == 0 ? 0 : 3;
}

inline int cmd_admissible(const ConfigFile& cfg, const CliOptions& opt,
                          std::ostream& log = std::cout) {
    Experiment ex = build_experiment(cfg);
    detail::apply_overrides(ex, opt);
    const AdmissibleReport rep = admissible(ex.data, ex.admissible_pairs, ex.admissible_n);

    std::filesystem::create_directories(ex.out_dir);
    std::ofstream csv(ex.out_dir + "/admissible.csv");
    csv << "delta,ratio_max\n";
    log << "delta,ratio_max\n";
    for (const auto& row : rep.rows) {
        csv << fmt17(row.delta) << ',' << fmt17(row.ratio_max) << '\n';
        log << fmt17(row.delta) << ',' << fmt17(row.ratio_max) << '\n';
    }
    log << "variation=" << rep.variation << " (pass < " << kAdmissiblePassVariation << ")\n";
    for (std::size_t i = 0; i < rep.growth.size(); ++i)
        log << "growth_decade_" << i << "=" << rep.growth[i] << " (fail >= "
            << kAdmissibleFailGrowth << ")\n";
    log << "verdict=" << AdmissibleReport::name(rep.verdict) << "\n";
    return 0;
}

inline int cmd_sard(const ConfigFile& cfg, const CliOptions& opt, std::ostream& log = std::cout) {
    Experiment ex = build_experiment(cfg);
    detail::apply_overrides(ex, opt);
    const Ensemble e = opt.ensemble_file.empty() ? ex.make_ensemble()
                                                 : Ensemble::load_csv(opt.ensemble_file);
    if (e.dim() != ex.data.dim)
        throw ConfigError("sard: ensemble dimension does not match [data] dim");
    const Batch batch = sample(ex.data, ex.flow.batch_size, 1);
    PotentialField field(e, ex.activation, ex.loss, batch, opt.threads);
    const std::vector<double> grid = ex.make_grid();
    const SardReport rep = sard_probe(field, grid, e.stride(), ex.sard_bins);

    std::filesystem::create_directories(ex.out_dir);
    rep.save_csv(ex.out_dir + "/sard.csv");
    log << "grid=" << rep.grid_size << " checked=" << rep.identity_checked
        << " skipped_small_a=" << rep.skipped_small_a << " skipped_kink=" << rep.skipped_kink
        << "\n"
        << "identity_residual_max=" << fmt17(rep.identity_residual_max)
        << " relative=" << fmt17(rep.identity_residual_rel) << "\n"
        << "grad_median=" << fmt17(rep.grad_median)
        << " near_critical_threshold=" << fmt17(rep.near_critical_threshold) << "\n";
    for (const auto& b : rep.bins)
        log << "bin [" << b.g_lo << ", " << b.g_hi << "): count=" << b.count
            << " near_critical=" << b.near_critical_fraction << " min_grad=" << b.min_grad
            << "\n";
    return 0;
}

inline int cmd_sweep(const ConfigFile& base, const CliOptions& opt,
                     std::ostream& log = std::cout) {
    if (!base.has_section("sweep"))
        throw ConfigError(base.path() + ": sweep requires a [sweep] section");
    // collect axes: "section.key = v1 v2 ..."
    struct Axis {
        std::string section, key;
        std::vector<std::string> values;
    };
    std::vector<Axis> axes;
    for (const auto& [k, entry] : base.sections().at("sweep")) {
        const auto dotpos = k.find('.');
        if (dotpos == std::string::npos)
            throw ConfigError(base.at_line(entry.line) + ": sweep keys look like section.key");
        Axis ax;
        ax.section = k.substr(0, dotpos);
        ax.key = k.substr(dotpos + 1);
        std::stringstream ss(entry.value);
        std::string tok;
        while (ss >> tok) ax.values.push_back(tok);
        if (ax.values.empty())
            throw ConfigError(base.at_line(entry.line) + ": sweep axis has no values");
        axes.push_back(std::move(ax));
        entry.used = true;
    }

    const Experiment base_ex = build_experiment(base);
    std::size_t cells = 1;
    for (const auto& ax : axes) cells *= ax.values.size();
    int worst = 0;
    for (std::size_t cell = 0; cell < cells; ++cell) {
        ConfigFile cfg = base;
        std::string name = "cell_" + std::to_string(cell);
        std::size_t rem = cell;
        for (const auto& ax : axes) {
            const std::string v = ax.values[rem % ax.values.size()];
            rem /= ax.values.size();
            cfg.set(ax.section, ax.key, v);
            name += "_" + ax.section + "." + ax.key + "=" + v;
        }
        cfg.set("output", "directory", base_ex.out_dir + "/" + name);
        log << "[sweep] " << name << "\n";
        CliOptions cell_opt = opt;
        cell_opt.respect_env_out = false;
        int code = 0;
        try {
            code = cmd_run(cfg, cell_opt, log);
        } catch (const FlowAbort&) {
            code = 2;
        }
        worst = std::max(worst, code);
    }
    return worst;
}

}  // namespace mflab
