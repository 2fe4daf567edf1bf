#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mflab/common.hpp"
#include "mflab/field.hpp"
#include "mflab/particle.hpp"

namespace mflab {

struct FlowConfig {
    enum class Integrator { euler, rk4 };
    enum class BatchMode { fresh, fixed_pool };

    double dt = 1e-2;
    double horizon = 1.0;
    Integrator integrator = Integrator::rk4;
    std::size_t batch_size = 256;
    BatchMode batch_mode = BatchMode::fresh;
    std::size_t pool_size = 0;  // 0: use batch_size
    std::size_t record_every = 1;
    std::optional<double> freeze_time;  // snapshot the field from this time on
    int threads = 1;
    double perturb_gradient = 0.0;  // test harness only
    std::uint64_t batch_stream_offset = 0;  // common-random-numbers control

    int order() const { return integrator == Integrator::rk4 ? 4 : 1; }
};

struct FlowAbort : std::runtime_error {
    FlowAbort(const std::string& msg, double t_) : std::runtime_error(msg), t(t_) {}
    double t = 0.0;
};

/// Diagnostic time series of one run. All series share length; `times`
/// strictly increasing.
struct TrajectoryRecord {
    std::vector<double> times;
    std::vector<double> risk;
    std::vector<double> risk_stderr;
    std::vector<double> second_moment;
    std::vector<double> sup_g;
    std::vector<double> sup_V;
    std::vector<double> mink_drift;
    std::vector<std::size_t> cone_violations;
    std::vector<double> dissipation;
    std::vector<double> barron;

    double dt = 0.0;
    int integrator_order = 4;
    std::size_t m = 0;
    std::optional<double> freeze_time;

    std::size_t size() const { return times.size(); }

    void save_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot open for writing: " + path);
        out << "t,risk,N,sup_g,sup_V,mink_drift,cone_violations,dissipation,barron\n";
        for (std::size_t i = 0; i < size(); ++i) {
            out << fmt17(times[i]) << ',' << fmt17(risk[i]) << ',' << fmt17(second_moment[i])
                << ',' << fmt17(sup_g[i]) << ',' << fmt17(sup_V[i]) << ',' << fmt17(mink_drift[i])
                << ',' << cone_violations[i] << ',' << fmt17(dissipation[i]) << ','
                << fmt17(barron[i]) << '\n';
        }
    }
};

using FieldBuilder = std::function<PotentialField(std::span<const double> positions)>;

namespace detail {

inline void check_finite_or_abort(std::span<const double> y, double t, std::size_t stride) {
    for (std::size_t c = 0; c < y.size(); ++c) {
        if (!std::isfinite(y[c])) {
            throw FlowAbort("non-finite parameter update at t=" + fmt17(t) + " (particle " +
                                std::to_string(c / stride) + ", component " +
                                std::to_string(c % stride) + ")",
                            t);
        }
    }
}

}  // namespace detail

/// One step of theta_i' = -grad delta_pi R(pi_m; theta_i). The field
/// (residuals) is re-evaluated at every stage from the stage positions, with
/// one batch shared across stages. m0 stamps are carried through untouched.
inline Ensemble step(const Ensemble& e, const FlowConfig& cfg, const FieldBuilder& builder,
                     double t = 0.0) {
    const std::size_t m = e.size();
    const int dim = e.dim();
    const std::size_t stride = static_cast<std::size_t>(e.stride());
    const std::size_t n = m * stride;
    const double dt = cfg.dt;

    Ensemble out = e;
    auto y = out.positions();

    auto velocity = [&](std::span<const double> pos, std::span<double> v) {
        PotentialField f = builder(pos);
        f.perturb = cfg.perturb_gradient;
        f.set_threads(cfg.threads);
        f.velocities(pos, m, dim, v);
    };

    if (cfg.integrator == FlowConfig::Integrator::euler) {
        std::vector<double> v(n);
        velocity(y, v);
        for (std::size_t c = 0; c < n; ++c) y[c] -= dt * v[c];
    } else {
        std::vector<double> k1(n), k2(n), k3(n), k4(n), stage(n);
        velocity(y, k1);
        for (std::size_t c = 0; c < n; ++c) stage[c] = y[c] - 0.5 * dt * k1[c];
        velocity(stage, k2);
        for (std::size_t c = 0; c < n; ++c) stage[c] = y[c] - 0.5 * dt * k2[c];
        velocity(stage, k3);
        for (std::size_t c = 0; c < n; ++c) stage[c] = y[c] - dt * k3[c];
        velocity(stage, k4);
        const double w = dt / 6.0;
        for (std::size_t c = 0; c < n; ++c)
            y[c] -= w * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
    }

    detail::check_finite_or_abort(y, t + dt, stride);
    return out;
}

/// D = (1/m) sum |grad delta_pi R(theta_i)|^2; the instantaneous -dR/dt.
inline double dissipation(const Ensemble& e, const PotentialField& f) {
    return f.dissipation(e.positions(), e.size(), e.dim());
}

namespace detail {

struct StepEval {
    PotentialField field;
    RiskEstimate risk;
};

inline StepEval eval_field_and_risk(const Ensemble& e, const ActivationSpec& spec,
                                    const LossModel& lm, std::shared_ptr<const Batch> batch,
                                    int threads) {
    std::vector<double> f(batch->size());
    realize_batch(spec, e.positions(), e.size(), e.dim(), *batch, f, threads);
    std::vector<double> residuals(batch->size());
    std::vector<double> lvals(batch->size());
    for (std::size_t j = 0; j < batch->size(); ++j) {
        residuals[j] = d1(lm, f[j], batch->ys[j]);
        lvals[j] = eval(lm, f[j], batch->ys[j]);
    }
    auto ms = mean_stderr(lvals);
    return {PotentialField(spec, std::move(batch), std::move(residuals)), {ms.value, ms.stderr_}};
}

inline double max_mink_drift(const Ensemble& e) {
    double worst = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) {
        auto t = e.theta(i);
        double ww = 0.0;
        for (std::size_t k = 1; k + 1 < t.size(); ++k) ww += t[k] * t[k];
        const double mink = -t[0] * t[0] + ww + t[t.size() - 1] * t[t.size() - 1];
        worst = std::max(worst, std::abs(mink - e.m0()[i]));
    }
    return worst;
}

inline std::size_t count_cone_violations(const Ensemble& e) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < e.size(); ++i) {
        const auto t = e.theta(i);
        double ww = 0.0;
        for (std::size_t k = 1; k + 1 < t.size(); ++k) ww += t[k] * t[k];
        const double mink = -t[0] * t[0] + ww + t[t.size() - 1] * t[t.size() - 1];
        if (mink < -1e-9 * (1.0 + norm2(t))) ++count;
    }
    return count;
}

}  // namespace detail

struct RunResult {
    TrajectoryRecord record;
    Ensemble final_state;
};

/// Full experiment loop. Fresh mode draws batch k from stream 1+k; fixed_pool
/// reuses one pool sampled from stream 0. When freeze_time is set the field
/// is snapshotted at the first recorded time >= freeze_time and the remaining
/// segment integrates the frozen potential.
inline RunResult run(const Ensemble& e0, const FlowConfig& cfg, const DataModel& model,
                            const LossModel& lm, const ActivationSpec& spec,
                            std::span<const double> grid) {
    if (cfg.dt <= 0.0 || cfg.horizon <= cfg.dt)
        throw std::invalid_argument("run: need 0 < dt < T");
    const std::size_t nsteps = static_cast<std::size_t>(std::llround(cfg.horizon / cfg.dt));
    const int dim_theta = e0.stride();

    std::shared_ptr<const Batch> pool;
    if (cfg.batch_mode == FlowConfig::BatchMode::fixed_pool) {
        const std::size_t sz = cfg.pool_size > 0 ? cfg.pool_size : cfg.batch_size;
        pool = std::make_shared<const Batch>(sample(model, sz, kStreamPool));
    }

    TrajectoryRecord rec;
    rec.dt = cfg.dt;
    rec.integrator_order = cfg.order();
    rec.m = e0.size();

    Ensemble e = e0;
    std::optional<PotentialField> frozen;

    auto record = [&](double t, const detail::StepEval& ev) {
        rec.times.push_back(t);
        rec.risk.push_back(ev.risk.value);
        rec.risk_stderr.push_back(ev.risk.stderr_);
        rec.second_moment.push_back(second_moment(e));
        const ProbeResult pr = ev.field.probe_sup(grid, dim_theta);
        rec.sup_g.push_back(pr.sup_g);
        rec.sup_V.push_back(pr.sup_V);
        rec.mink_drift.push_back(detail::max_mink_drift(e));
        rec.cone_violations.push_back(detail::count_cone_violations(e));
        rec.dissipation.push_back(ev.field.dissipation(e.positions(), e.size(), e.dim()));
        rec.barron.push_back(barron_estimate(e));
    };

    for (std::size_t k = 0; k <= nsteps; ++k) {
        const double t = static_cast<double>(k) * cfg.dt;

        std::shared_ptr<const Batch> batch;
        if (frozen) {
            batch = frozen->batch_ptr();
        } else if (pool) {
            batch = pool;
        } else {
            batch = std::make_shared<const Batch>(
                sample(model, cfg.batch_size, 1 + cfg.batch_stream_offset + k));
        }

        detail::StepEval ev = frozen
            ? detail::StepEval{*frozen, risk_estimate(e, spec, lm, *batch, cfg.threads)}
            : detail::eval_field_and_risk(e, spec, lm, batch, cfg.threads);
        ev.field.set_threads(cfg.threads);
        ev.field.perturb = cfg.perturb_gradient;

        if (!frozen && cfg.freeze_time && t >= *cfg.freeze_time - 0.5 * cfg.dt) {
            frozen = ev.field;
            if (!rec.freeze_time) rec.freeze_time = t;
        }

        if (k % cfg.record_every == 0 || k == nsteps) record(t, ev);
        if (k == nsteps) break;

        FieldBuilder builder;
        if (frozen) {
            PotentialField snapshot = *frozen;
            builder = [snapshot](std::span<const double>) { return snapshot; };
        } else {
            builder = [&](std::span<const double> pos) {
                std::vector<double> f(batch->size());
                realize_batch(spec, pos, e.size(), e.dim(), *batch, f, cfg.threads);
                std::vector<double> residuals(batch->size());
                for (std::size_t j = 0; j < batch->size(); ++j)
                    residuals[j] = d1(lm, f[j], batch->ys[j]);
                return PotentialField(spec, batch, std::move(residuals));
            };
        }
        e = step(e, cfg, builder, t);
    }

    return {std::move(rec), std::move(e)};
}

/// Integrates a fixed, externally built potential (hand-built residual
/// profiles for growth experiments). Records against the frozen field.
inline RunResult run_frozen(const Ensemble& e0, const FlowConfig& cfg,
                                   const PotentialField& field, const LossModel& lm,
                                   std::span<const double> grid) {
    if (cfg.dt <= 0.0 || cfg.horizon <= cfg.dt)
        throw std::invalid_argument("run_frozen: need 0 < dt < T");
    const std::size_t nsteps = static_cast<std::size_t>(std::llround(cfg.horizon / cfg.dt));
    const int dim_theta = e0.stride();

    TrajectoryRecord rec;
    rec.dt = cfg.dt;
    rec.integrator_order = cfg.order();
    rec.m = e0.size();
    rec.freeze_time = 0.0;

    PotentialField f = field;
    f.set_threads(cfg.threads);
    f.perturb = cfg.perturb_gradient;
    FieldBuilder builder = [&f](std::span<const double>) { return f; };

    Ensemble e = e0;
    for (std::size_t k = 0; k <= nsteps; ++k) {
        const double t = static_cast<double>(k) * cfg.dt;
        if (k % cfg.record_every == 0 || k == nsteps) {
            rec.times.push_back(t);
            const RiskEstimate re = risk_estimate(e, f.spec(), lm, f.batch(), cfg.threads);
            rec.risk.push_back(re.value);
            rec.risk_stderr.push_back(re.stderr_);
            rec.second_moment.push_back(second_moment(e));
            const ProbeResult pr = f.probe_sup(grid, dim_theta);
            rec.sup_g.push_back(pr.sup_g);
            rec.sup_V.push_back(pr.sup_V);
            rec.mink_drift.push_back(detail::max_mink_drift(e));
            rec.cone_violations.push_back(detail::count_cone_violations(e));
            rec.dissipation.push_back(f.dissipation(e.positions(), e.size(), e.dim()));
            rec.barron.push_back(barron_estimate(e));
        }
        if (k == nsteps) break;
        e = step(e, cfg, builder, t);
    }
    return {std::move(rec), std::move(e)};
}

}  // namespace mflab
