#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "mflab/config.hpp"
#include "mflab/diagnostics.hpp"
#include "mflab/flow.hpp"

namespace mflab {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace checks_detail {

inline Particle random_particle(Rng& rng, int d) {
    std::vector<double> w(static_cast<std::size_t>(d));
    rng.normal_fill(w);
    return make_particle(rng.normal(), std::move(w), rng.normal());
}

inline double kink_distance(std::span<const double> theta, const Batch& b) {
    const std::size_t d = static_cast<std::size_t>(b.dim);
    const double wb = norm(theta.subspan(1, theta.size() - 1));
    if (wb == 0.0) return 0.0;
    double worst = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < b.size(); ++j) {
        auto x = b.x(j);
        double z = theta[d + 1];
        for (std::size_t k = 0; k < d; ++k) z += theta[k + 1] * x[k];
        worst = std::min(worst, std::abs(z) / (wb * std::sqrt(1.0 + norm2(x))));
    }
    return worst;
}

inline DataModel fixture_data(std::uint64_t seed = 2001) {
    DataModel m;
    m.dim = 2;
    m.seed = seed;
    m.input.kind = InputLaw::Kind::uniform_sphere;
    m.label.kind = LabelModel::Kind::binary;
    m.label.lambda = [](std::span<const double> x) { return x[0] > 0.0 ? 0.8 : 0.2; };
    return m;
}

inline DataModel fixture_empirical() {
    DataModel m;
    m.dim = 2;
    m.seed = 2003;
    m.input.kind = InputLaw::Kind::empirical;
    m.input.points = {{999.0, 0.0}, {0.31, -0.44}, {-0.92, 0.13}, {0.55, 0.71},
                      {-0.27, -0.64}, {0.83, 0.20}, {-0.51, 0.88}, {0.06, -0.97},
                      {0.44, 0.38}, {-0.73, -0.25}};
    m.label.kind = LabelModel::Kind::binary;
    m.label.lambda = [](std::span<const double>) { return 0.5; };
    return m;
}

inline DataModel fixture_gaussian() {
    DataModel m;
    m.dim = 2;
    m.seed = 2005;
    m.input.kind = InputLaw::Kind::gaussian_mixture;
    m.input.components = {{{0.0, 0.0}, 1.0, 1.0}};
    m.label.kind = LabelModel::Kind::binary;
    m.label.lambda = [](std::span<const double>) { return 0.7; };
    return m;
}

inline const LossModel kSoftplusLoss{LossModel::Kind::softplus, 2.0, std::nullopt};

}  // namespace checks_detail

/// The reduced-size invariant suite behind `mflab check`. `perturb_gradient`
/// injects a radial defect into every velocity evaluation; at 1e-3 it must
/// trip the Euler-identity, tangency, conservation and dN/dt checks.
inline std::vector<CheckResult> run_invariant_suite(double perturb_gradient = 0.0,
                                                    int threads = 1) {
    namespace cd = checks_detail;
    std::vector<CheckResult> results;
    const auto add = [&](const std::string& name, bool pass, const std::string& detail) {
        results.push_back({name, pass, detail});
    };
    std::ostringstream os;
    const auto fmt = [&os](auto&&... parts) {
        os.str("");
        (os << ... << parts);
        return os.str();
    };

    const DataModel data = cd::fixture_data();
    const LossModel& loss = cd::kSoftplusLoss;
    const ActivationSpec relu;

    // ---- params ----
    {
        Rng rng(3001);
        bool ok = true;
        for (int i = 0; i < 500 && ok; ++i) {
            const Particle p = cd::random_particle(rng, 2);
            ok = minkowski(sym_flip(p)) == minkowski(p);
        }
        add("params.symflip_minkowski_exact", ok, "T-flip preserves the Minkowski norm exactly");
    }
    {
        const Ensemble e = init_omni(4096, 2, 3003);
        double worst = 1.0;
        for (std::size_t i = 0; i < e.size(); ++i)
            worst = std::min(worst, minkowski(e.particle(i)));
        add("params.omni_in_cone", worst >= 0.0, fmt("min minkowski = ", worst));
    }
    {
        Ensemble e = init_omni(128, 2, 3005);
        e.set_particle(7, make_particle(0.0, {0.0, 0.0}, 0.0));
        const Ensemble back = reparametrize_minimizer(sphere_project(e), e.dim());
        Rng rng(3007);
        double worst = 0.0;
        for (int i = 0; i < 1000; ++i) {
            std::vector<double> x = {rng.normal(), rng.normal()};
            worst = std::max(worst, std::abs(realize(e, relu, x) - realize(back, relu, x)));
        }
        const double tol = 1e-10 * (1.0 + second_moment(e));
        add("params.sphere_roundtrip_realization", worst <= tol,
            fmt("sup |f - f'| = ", worst, " tol ", tol));
    }
    {
        Ensemble e = init_omni(128, 2, 3009);
        Ensemble scaled = e;
        Rng rng(3011);
        for (std::size_t i = 0; i < e.size(); ++i) {
            Particle p = e.particle(i);
            const double l = std::exp(rng.uniform(-1.0, 1.0));
            p.a *= l;
            for (double& w : p.w) w /= l;
            p.b /= l;
            p.m0 = minkowski(p);
            scaled.set_particle(i, p);
        }
        const double rel = std::abs(barron_estimate(scaled) - barron_estimate(e)) /
                           (1.0 + barron_estimate(e));
        add("params.rescale_invariance", rel <= 1e-12, fmt("barron relative change ", rel));
    }

    // ---- data ----
    {
        const Batch a = sample(data, 2048, 5);
        const Batch b = sample(data, 2048, 5);
        add("data.reproducible_batches", a.xs == b.xs && a.ys == b.ys, "bit-identical resample");
    }
    {
        const AdmissibleReport gau = admissible(cd::fixture_gaussian(), 400, 20000);
        const AdmissibleReport emp = admissible(cd::fixture_empirical(), 15000, 10000);
        const bool ok = gau.verdict == AdmissibleReport::Verdict::pass &&
                        emp.verdict == AdmissibleReport::Verdict::fail;
        add("data.admissible_monotone", ok,
            fmt("gaussian variation ", gau.variation, ", empirical growth ",
                emp.growth.empty() ? 0.0 : emp.growth[0]));
    }
    {
        bool ok = true;
        for (std::size_t n : {1000, 10000, 100000}) {
            const Batch b = sample(data, n, 11);
            ok = ok && std::abs(mean(b.ys)) <= 4.0 / std::sqrt(static_cast<double>(n));
        }
        add("data.label_mean_mc_rate", ok, "E y = 0 recovered at O(n^-1/2)");
    }

    // ---- loss ----
    {
        Rng rng(3013);
        bool ok = true;
        for (auto lm : {LossModel{LossModel::Kind::huber, 2.0, std::nullopt},
                        LossModel{LossModel::Kind::pseudo_huber, 2.0, std::nullopt},
                        cd::kSoftplusLoss, LossModel{LossModel::Kind::power, 1.5, std::nullopt}}) {
            for (int i = 0; i < 1000 && ok; ++i) {
                const double y0 = rng.uniform(-5.0, 5.0), y1 = rng.uniform(-5.0, 5.0);
                const double yp = lm.kind == LossModel::Kind::softplus
                                      ? (rng.uniform() < 0.5 ? 1.0 : -1.0)
                                      : rng.uniform(-5.0, 5.0);
                const double t = rng.uniform();
                ok = eval(lm, t * y0 + (1 - t) * y1, yp) <=
                     t * eval(lm, y0, yp) + (1 - t) * eval(lm, y1, yp) + 1e-12;
            }
        }
        add("loss.convexity", ok, "chord above graph on random triples");
    }
    {
        Rng rng(3015);
        double worst = 0.0;
        for (auto lm : {LossModel{LossModel::Kind::huber, 2.0, std::nullopt},
                        LossModel{LossModel::Kind::pseudo_huber, 2.0, std::nullopt},
                        cd::kSoftplusLoss}) {
            for (int i = 0; i < 1000000; ++i) {
                const double y = rng.uniform(-50.0, 50.0);
                const double yp = lm.kind == LossModel::Kind::softplus
                                      ? (i % 2 ? 1.0 : -1.0)
                                      : rng.uniform(-50.0, 50.0);
                worst = std::max(worst, std::abs(d1(lm, y, yp)));
            }
        }
        add("loss.derivative_bound", worst <= 1.0, fmt("sup |d1| = ", worst));
    }
    {
        Rng rng(3017);
        const double h = 1e-5;
        bool ok = true;
        const LossModel lm{LossModel::Kind::huber, 2.0, std::nullopt};
        for (int i = 0; i < 500 && ok; ++i) {
            const double y = rng.uniform(-4.0, 4.0), yp = rng.uniform(-4.0, 4.0);
            if (std::abs(std::abs(y - yp) - 1.0) < 10.0 * h) continue;
            const double fd = (eval(lm, y + h, yp) - eval(lm, y - h, yp)) / (2.0 * h);
            ok = std::abs(d1(lm, y, yp) - fd) <= 1e-7;
        }
        add("loss.d1_matches_fd", ok, "central differences away from the kink");
    }
    {
        LossModel lm{LossModel::Kind::power, 2.0, 1.0};
        bool ok = clip_eval(lm, 3.0, 0.0) == 2.5;
        Rng rng(3019);
        for (int i = 0; i < 200 && ok; ++i) {
            const double y = rng.uniform(-1.0, 1.0), yp = rng.uniform(-2.0, 2.0);
            ok = eval(lm, y, yp) == detail::raw_eval(lm, y, yp);
        }
        add("loss.clip_branches", ok, "identity inside |y|<=S, affine beyond");
    }

    // ---- field ----
    const Ensemble fe = init_omni(64, 2, 3021);
    auto fbatch = std::make_shared<const Batch>(sample(data, 512, 1));
    PotentialField ffield(fe, relu, loss, fbatch, threads);
    ffield.perturb = perturb_gradient;
    const double supr = ffield.sup_residual();
    {
        Rng rng(3023);
        double worst = 0.0;
        int checked = 0;
        while (checked < 300) {
            const Particle p = cd::random_particle(rng, 2);
            std::vector<double> theta = {p.a, p.w[0], p.w[1], p.b};
            if (cd::kink_distance(theta, *fbatch) < 1e-8) continue;
            ++checked;
            const auto v = ffield.potential_grad(p);
            const double res = std::abs(ffield.potential(p) - 0.5 * dot(theta, v));
            worst = std::max(worst, res / ((1.0 + p.norm2()) * supr));
        }
        add("field.euler_identity", worst <= 1e-10, fmt("max scaled residual ", worst));
    }
    {
        Rng rng(3025);
        double worst = 0.0;
        int checked = 0;
        while (checked < 200) {
            std::vector<double> wb = {rng.normal(), rng.normal(), rng.normal()};
            const double r = norm(std::span<const double>(wb));
            const Particle p = make_particle((rng.uniform() < 0.5 ? 1.0 : -1.0) * r,
                                             {wb[0], wb[1]}, wb[2]);
            std::vector<double> theta = {p.a, p.w[0], p.w[1], p.b};
            if (std::abs(minkowski(p)) > 1e-12 * p.norm2()) continue;
            if (cd::kink_distance(theta, *fbatch) < 1e-8) continue;
            ++checked;
            const auto v = ffield.potential_grad(p);
            const double inner = -p.a * v[0] + p.w[0] * v[1] + p.w[1] * v[2] + p.b * v[3];
            worst = std::max(worst, std::abs(inner) / (std::sqrt(p.norm2()) * supr));
        }
        add("field.boundary_tangency", worst <= 1e-8, fmt("max scaled flux ", worst));
    }
    {
        Rng rng(3027);
        const double h = 1e-6;
        double worst = 0.0;
        int checked = 0;
        while (checked < 1000) {
            const Particle p = cd::random_particle(rng, 2);
            std::vector<double> theta = {p.a, p.w[0], p.w[1], p.b};
            if (cd::kink_distance(theta, *fbatch) < 100.0 * h) continue;
            ++checked;
            const auto v = ffield.potential_grad(p);
            const double vn = norm(std::span<const double>(v));
            for (std::size_t c = 0; c < 4; ++c) {
                auto tp = theta, tm = theta;
                tp[c] += h;
                tm[c] -= h;
                const double fd = (ffield.potential(tp) - ffield.potential(tm)) / (2.0 * h);
                worst = std::max(worst, std::abs(v[c] - fd) / (1.0 + vn));
            }
        }
        add("field.grad_matches_fd", worst <= 1e-6, fmt("max scaled fd error ", worst));
    }
    {
        Rng rng(3029);
        double worst = 0.0;
        for (int i = 0; i < 1000; ++i) {
            const Particle p = cd::random_particle(rng, 2);
            const Particle q = cd::random_particle(rng, 2);
            if (minkowski(p) < 0.0 || minkowski(q) < 0.0) continue;
            const auto vp = ffield.potential_grad(p);
            const auto vq = ffield.potential_grad(q);
            std::vector<double> tp = {p.a, p.w[0], p.w[1], p.b};
            std::vector<double> tq = {q.a, q.w[0], q.w[1], q.b};
            double dv = 0.0, dth = 0.0;
            for (std::size_t c = 0; c < 4; ++c) {
                dv += (vp[c] - vq[c]) * (vp[c] - vq[c]);
                dth += (tp[c] - tq[c]) * (tp[c] - tq[c]);
            }
            if (dth > 0.0) worst = std::max(worst, std::sqrt(dv / dth));
        }
        // logged empirical constant; C_l = 1 for softplus
        add("field.lipschitz_quotient", worst <= 10.0, fmt("max quotient C = ", worst));
    }

    // ---- flow ----
    {
        // rk4 order on the kink-free fixture, dt halved twice
        const Ensemble e0 = init_active(64, 2, 3031);
        auto drift_at = [&](double dt) {
            FlowConfig cfg;
            cfg.dt = dt;
            cfg.horizon = 0.5;
            cfg.batch_mode = FlowConfig::BatchMode::fixed_pool;
            cfg.pool_size = 128;
            cfg.record_every = 1 << 20;
            cfg.threads = threads;
            cfg.perturb_gradient = perturb_gradient;
            const auto grid = make_probe_grid(8, 4, 3033);
            return run(e0, cfg, data, loss, relu, grid).record.mink_drift.back();
        };
        const double d0 = drift_at(0.04), d1_ = drift_at(0.02), d2 = drift_at(0.01);
        const double r1 = d0 / d1_, r2 = d1_ / d2;
        const bool ok = r1 >= 8.0 && r1 <= 64.0 && r2 >= 8.0 && r2 <= 64.0;
        add("flow.rk4_conservation_order", ok,
            fmt("drift ratios per halving: ", r1, ", ", r2, " (~16 expected)"));
    }
    {
        FlowConfig cfg;
        cfg.dt = 0.01;
        cfg.horizon = 1.5;
        cfg.batch_size = 256;
        cfg.record_every = 15;
        cfg.threads = threads;
        cfg.perturb_gradient = perturb_gradient;
        const auto grid = make_probe_grid(16, 4, 3035);
        const auto rr = run(init_omni(128, 2, 3037), cfg, data, loss, relu, grid);
        const double excess = sublinear_bound_excess(rr.record);
        const double pexcess = pairwise_bound_excess(rr.record);
        add("flow.sublinear_moment_bound", excess <= 0.0, fmt("max excess ", excess));
        add("flow.pairwise_moment_bound", pexcess <= 0.0, fmt("max excess ", pexcess));
        bool mono = true;
        const auto& rec = rr.record;
        for (std::size_t i = 0; i + 1 < rec.size(); ++i)
            mono = mono && rec.risk[i + 1] <= rec.risk[i] +
                                                  3.0 * (rec.risk_stderr[i] + rec.risk_stderr[i + 1]) +
                                                  5.0 * rec.dt;
        add("flow.risk_monotone", mono, "non-increasing up to noise");
        std::size_t viol = 0;
        for (std::size_t v : rec.cone_violations) viol += v;
        add("flow.cone_preserved", viol == 0, fmt("total violations ", viol));
    }
    {
        // dN/dt = -4 mean potential, central difference with the same batch
        Ensemble e = init_omni(64, 2, 3039);
        auto batch = std::make_shared<const Batch>(sample(data, 4096, 1));
        FieldBuilder builder = [&](std::span<const double> pos) {
            std::vector<double> f(batch->size());
            realize_batch(relu, pos, e.size(), e.dim(), *batch, f, threads);
            std::vector<double> res(batch->size());
            for (std::size_t j = 0; j < batch->size(); ++j)
                res[j] = d1(loss, f[j], batch->ys[j]);
            return PotentialField(relu, batch, std::move(res));
        };
        FlowConfig coarse;
        coarse.dt = 0.02;
        coarse.perturb_gradient = perturb_gradient;
        coarse.threads = threads;
        for (int k = 0; k < 10; ++k) e = step(e, coarse, builder);

        FlowConfig probe = coarse;
        probe.dt = 1e-4;
        PotentialField f = builder(e.positions());
        f.perturb = perturb_gradient;
        const double meang = f.mean_potential(e.positions(), e.size(), e.dim());
        const Ensemble fwd = step(e, probe, builder);
        FlowConfig back = probe;
        back.dt = -probe.dt;
        const Ensemble bwd = step(e, back, builder);
        const double fd = (second_moment(fwd) - second_moment(bwd)) / (2.0 * probe.dt);
        const double err = std::abs(fd + 4.0 * meang);
        const double tol = 2e-4 * std::abs(4.0 * meang) + 1e-9 * (1.0 + second_moment(e));
        add("flow.homogeneity_dNdt", err <= tol,
            fmt("fd ", fd, " vs -4<g> ", -4.0 * meang, " err ", err, " tol ", tol));
    }

    // ---- diagnostics ----
    {
        TrajectoryRecord rec;
        rec.dt = 0.01;
        rec.m = 8;
        rec.times = {0.0, 1.0, 2.0};
        rec.risk = {1.0, 0.9, 0.8};
        rec.risk_stderr = {0.0, 0.0, 0.0};
        rec.sup_g = {1.0, 1.0, 1.0};
        rec.sup_V = {1.0, 1.0, 1.0};
        rec.mink_drift = {0.0, 0.0, 0.0};
        rec.cone_violations = {0, 0, 0};
        rec.dissipation = {0.0, 0.0, 0.0};
        rec.barron = {1.0, 1.0, 1.0};
        rec.second_moment = {1.0, 2.0, 3.0};  // within 2(N0 + R0 t)
        const auto under = convergence_report(rec, 0.0, 0.0);
        rec.second_moment = {1.0, 2.0, 7.0};  // above 2(1 + 1*2) + slack
        const auto over = convergence_report(rec, 0.0, 0.0);
        const bool ok = under.verdict != ConvergenceReport::Verdict::growing_moments &&
                        over.verdict == ConvergenceReport::Verdict::growing_moments;
        add("diagnostics.growth_verdict_soundness", ok,
            "growing-moments emitted iff the bound is exceeded");
    }
    {
        const auto grid = make_probe_grid(256, 4, 3041);
        const SardReport rep = sard_probe(ffield, grid, 4, 8);
        std::size_t total = 0;
        for (const auto& b : rep.bins) total += b.count;
        add("diagnostics.sard_bins_partition", total == rep.grid_size,
            fmt("bins sum ", total, " of ", rep.grid_size));
        std::vector<double> doubled(ffield.residuals().begin(), ffield.residuals().end());
        for (double& r : doubled) r *= 2.0;
        PotentialField f2(relu, fbatch, std::move(doubled));
        f2.perturb = perturb_gradient;
        const SardReport rep2 = sard_probe(f2, grid, 4, 8);
        add("diagnostics.sard_residual_linear",
            rep2.identity_residual_max == 2.0 * rep.identity_residual_max,
            fmt("residual ", rep.identity_residual_max, " doubles to ",
                rep2.identity_residual_max));
        add("diagnostics.sard_identity", rep.identity_residual_rel <= 1e-8,
            fmt("relative identity residual ", rep.identity_residual_rel));
    }
    {
        FlowConfig cfg;
        cfg.dt = 0.02;
        cfg.horizon = 0.2;
        cfg.batch_size = 64;
        cfg.record_every = 2;
        cfg.perturb_gradient = perturb_gradient;
        const auto grid = make_probe_grid(16, 4, 3043);
        cfg.threads = 1;
        const auto a = run(init_omni(48, 2, 3045), cfg, data, loss, relu, grid);
        cfg.threads = 2;
        const auto b = run(init_omni(48, 2, 3045), cfg, data, loss, relu, grid);
        const bool ok = a.record.risk == b.record.risk &&
                        a.record.second_moment == b.record.second_moment &&
                        a.record.sup_g == b.record.sup_g &&
                        std::equal(a.final_state.positions().begin(),
                                   a.final_state.positions().end(),
                                   b.final_state.positions().begin());
        add("flow.thread_count_determinism", ok, "bit-identical across thread counts");
    }

    return results;
}

}  // namespace mflab
