#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mflab/diagnostics.hpp"
#include "mflab/flow.hpp"

using namespace mflab;

namespace {

DataModel step_model(int d = 2, std::uint64_t seed = 1) {
    DataModel m;
    m.dim = d;
    m.seed = seed;
    m.input.kind = InputLaw::Kind::uniform_sphere;
    m.label.kind = LabelModel::Kind::binary;
    m.label.lambda = [](std::span<const double> x) { return x[0] > 0.0 ? 0.8 : 0.2; };
    return m;
}

const LossModel kSoftplus{LossModel::Kind::softplus, 2.0, std::nullopt};

FieldBuilder live_builder(const Ensemble& e, const ActivationSpec& spec, const LossModel& lm,
                          std::shared_ptr<const Batch> batch) {
    const std::size_t m = e.size();
    const int dim = e.dim();
    return [=](std::span<const double> pos) {
        std::vector<double> f(batch->size());
        realize_batch(spec, pos, m, dim, *batch, f, 1);
        std::vector<double> residuals(batch->size());
        for (std::size_t j = 0; j < batch->size(); ++j)
            residuals[j] = d1(lm, f[j], batch->ys[j]);
        return PotentialField(spec, batch, std::move(residuals));
    };
}

}  // namespace

TEST_CASE("zero-residual field leaves the ensemble unchanged") {
    Ensemble e = init_omni(16, 2, 3);
    Batch b = sample(step_model(), 64, 1);
    auto batch = std::make_shared<const Batch>(std::move(b));
    PotentialField zero(ActivationSpec{}, batch, std::vector<double>(batch->size(), 0.0));
    FieldBuilder builder = [&](std::span<const double>) { return zero; };

    FlowConfig cfg;
    cfg.dt = 0.1;
    for (auto integ : {FlowConfig::Integrator::euler, FlowConfig::Integrator::rk4}) {
        cfg.integrator = integ;
        const Ensemble out = step(e, cfg, builder);
        CHECK(std::equal(e.positions().begin(), e.positions().end(), out.positions().begin()));
    }
}

TEST_CASE("rk4 against the closed-form linear field") {
    // d=1 field with samples x=+1,-1 and residuals +1,-1:
    // g(theta) = a (sigma(w+b) - sigma(-w+b))/2 = a(w+b)/2 while w > |b|,
    // so with u = w+b:  a' = -u/2, u' = -a, (w-b)' = 0.
    Batch b;
    b.dim = 1;
    b.xs = {1.0, -1.0};
    b.ys = {0.0, 0.0};
    auto batch = std::make_shared<const Batch>(std::move(b));
    PotentialField frozen(ActivationSpec{}, batch, {1.0, -1.0});
    FieldBuilder builder = [&](std::span<const double>) { return frozen; };

    const double a0 = 0.1, w0 = 1.0, b0 = 0.0;
    Ensemble e(1, 1);
    e.set_particle(0, make_particle(a0, {w0}, b0));

    FlowConfig cfg;
    cfg.dt = 1e-3;
    cfg.integrator = FlowConfig::Integrator::rk4;
    const std::size_t nsteps = 1000;  // t = 1
    Ensemble cur = e;
    for (std::size_t k = 0; k < nsteps; ++k) cur = step(cur, cfg, builder);

    const double t = 1.0;
    const double s = std::sqrt(0.5);  // rate 1/sqrt(2)
    const double u0 = w0 + b0;
    const double vp = a0 + s * u0, vm = a0 - s * u0;
    const double a_t = 0.5 * (vp * std::exp(-s * t) + vm * std::exp(s * t));
    const double u_t = 0.5 * (vp * std::exp(-s * t) - vm * std::exp(s * t)) / s;
    const double w_t = 0.5 * (u_t + (w0 - b0));
    const double b_t = 0.5 * (u_t - (w0 - b0));

    const Particle p = cur.particle(0);
    CHECK(p.a == Catch::Approx(a_t).margin(1e-10));
    CHECK(p.w[0] == Catch::Approx(w_t).margin(1e-10));
    CHECK(p.b == Catch::Approx(b_t).margin(1e-10));
}

TEST_CASE("minkowski drift shrinks at integrator order on kink-free runs") {
    // Kink crossings cap rk4 drift at order 2 (each straddling step pays
    // O(dt^2)); the order study therefore runs from an all-active ensemble,
    // where the batch field is smooth along the whole trajectory tube.
    const DataModel model = step_model();
    const ActivationSpec relu;
    const auto grid = make_probe_grid(32, 4, 7);
    Ensemble e0 = init_active(64, 2, 9);

    auto drift_at = [&](double dt, FlowConfig::Integrator integ) {
        FlowConfig cfg;
        cfg.dt = dt;
        cfg.horizon = 0.5;
        cfg.integrator = integ;
        cfg.batch_mode = FlowConfig::BatchMode::fixed_pool;
        cfg.pool_size = 128;
        cfg.record_every = 100000;  // only endpoints
        const auto rr = run(e0, cfg, model, kSoftplus, relu, grid);
        return rr.record.mink_drift.back();
    };

    const double r4a = drift_at(0.02, FlowConfig::Integrator::rk4);
    const double r4b = drift_at(0.01, FlowConfig::Integrator::rk4);
    INFO("rk4 drifts " << r4a << " -> " << r4b << " ratio " << r4a / r4b);
    CHECK(r4a / r4b >= 8.0);
    CHECK(r4a / r4b <= 64.0);

    const double r1a = drift_at(0.02, FlowConfig::Integrator::euler);
    const double r1b = drift_at(0.01, FlowConfig::Integrator::euler);
    INFO("euler drifts " << r1a << " -> " << r1b << " ratio " << r1a / r1b);
    CHECK(r1a / r1b >= 1.5);
    CHECK(r1a / r1b <= 3.0);
}

TEST_CASE("kink crossings degrade rk4 drift to order 2") {
    const DataModel model = step_model();
    const auto grid = make_probe_grid(8, 4, 7);
    Ensemble e0 = init_omni(64, 2, 9);
    auto drift_at = [&](double dt) {
        FlowConfig cfg;
        cfg.dt = dt;
        cfg.horizon = 0.5;
        cfg.batch_mode = FlowConfig::BatchMode::fixed_pool;
        cfg.pool_size = 128;
        cfg.record_every = 100000;
        return run(e0, cfg, model, kSoftplus, ActivationSpec{}, grid).record.mink_drift.back();
    };
    const double a = drift_at(0.02), b = drift_at(0.01);
    INFO("omni-init rk4 drifts " << a << " -> " << b << " ratio " << a / b);
    CHECK(a / b >= 2.0);
    CHECK(a / b <= 10.0);
}

TEST_CASE("single rk4 step drift scales like dt^5") {
    const DataModel model = step_model(2, 21);
    const ActivationSpec relu;
    Ensemble e0 = init_active(64, 2, 23);
    auto batch = std::make_shared<const Batch>(sample(model, 128, 1));
    auto builder = live_builder(e0, relu, kSoftplus, batch);

    auto one_step_drift = [&](double dt) {
        FlowConfig cfg;
        cfg.dt = dt;
        cfg.integrator = FlowConfig::Integrator::rk4;
        const Ensemble out = step(e0, cfg, builder);
        double worst = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i)
            worst = std::max(worst, std::abs(minkowski(out.particle(i)) - out.m0()[i]));
        return worst;
    };
    const double d1 = one_step_drift(0.08);
    const double d2 = one_step_drift(0.04);
    INFO("one-step drifts " << d1 << " -> " << d2 << " ratio " << d1 / d2);
    CHECK(d1 / d2 >= 16.0);  // local order 5, allow kink slack
}

TEST_CASE("cone is preserved along rk4 runs") {
    const DataModel model = step_model();
    FlowConfig cfg;
    cfg.dt = 0.01;
    cfg.horizon = 1.0;
    cfg.batch_size = 64;
    cfg.record_every = 10;
    const auto grid = make_probe_grid(32, 4, 11);
    const auto rr = run(init_omni(128, 2, 13), cfg, model, kSoftplus, ActivationSpec{}, grid);
    for (std::size_t v : rr.record.cone_violations) REQUIRE(v == 0);
    for (double d : rr.record.mink_drift) REQUIRE(d <= 1e-8);
}

TEST_CASE("moment bounds hold along live runs") {
    const DataModel model = step_model(2, 31);
    FlowConfig cfg;
    cfg.dt = 0.01;
    cfg.horizon = 2.0;
    cfg.batch_size = 256;
    cfg.record_every = 20;
    const auto grid = make_probe_grid(32, 4, 17);
    const auto rr = run(init_omni(128, 2, 19), cfg, model, kSoftplus, ActivationSpec{}, grid);
    CHECK(sublinear_bound_excess(rr.record) <= 0.0);
    CHECK(pairwise_bound_excess(rr.record) <= 0.0);
}

TEST_CASE("risk decreases up to noise") {
    const DataModel model = step_model(2, 37);
    FlowConfig cfg;
    cfg.dt = 0.02;
    cfg.horizon = 3.0;
    cfg.batch_size = 512;
    cfg.record_every = 25;
    const auto grid = make_probe_grid(16, 4, 23);
    const auto rr = run(init_omni(256, 2, 29), cfg, model, kSoftplus, ActivationSpec{}, grid);
    const auto& rec = rr.record;
    for (std::size_t i = 0; i + 1 < rec.size(); ++i) {
        REQUIRE(rec.risk[i + 1] <= rec.risk[i] +
                                       3.0 * (rec.risk_stderr[i] + rec.risk_stderr[i + 1]) +
                                       5.0 * rec.dt);
    }
    CHECK(rec.risk.back() < rec.risk.front());
}

TEST_CASE("homogeneity identity dN/dt = -4 mean potential") {
    const DataModel model = step_model(2, 41);
    const ActivationSpec relu;
    Ensemble e = init_omni(64, 2, 43);
    auto batch = std::make_shared<const Batch>(sample(model, 2048, 1));
    auto builder = live_builder(e, relu, kSoftplus, batch);

    // advance a little first
    FlowConfig coarse;
    coarse.dt = 0.02;
    for (int k = 0; k < 10; ++k) e = step(e, coarse, builder);

    FlowConfig probe;
    probe.dt = 1e-4;
    probe.integrator = FlowConfig::Integrator::rk4;
    builder = live_builder(e, relu, kSoftplus, batch);
    const PotentialField f = builder(e.positions());
    const double meang = f.mean_potential(e.positions(), e.size(), e.dim());

    const Ensemble fwd = step(e, probe, builder);
    FlowConfig back = probe;
    back.dt = -probe.dt;
    const Ensemble bwd = step(e, back, builder);
    const double fd = (second_moment(fwd) - second_moment(bwd)) / (2.0 * probe.dt);
    INFO("fd " << fd << " vs -4 mean g " << -4.0 * meang);
    REQUIRE(std::abs(fd + 4.0 * meang) <= 1e-3 * std::abs(4.0 * meang) + 1e-8);
}

TEST_CASE("dissipation matches -dR/dt and scales quadratically") {
    const DataModel model = step_model(2, 47);
    const ActivationSpec relu;
    Ensemble e = init_omni(64, 2, 53);
    auto batch = std::make_shared<const Batch>(sample(model, 1024, 1));
    auto builder = live_builder(e, relu, kSoftplus, batch);
    const PotentialField f = builder(e.positions());

    const double d = dissipation(e, f);
    CHECK(d >= 0.0);

    FlowConfig cfg;
    cfg.dt = 1e-4;
    cfg.integrator = FlowConfig::Integrator::euler;
    const Ensemble next = step(e, cfg, builder);
    const double r0 = risk(e, relu, kSoftplus, *batch);
    const double r1 = risk(next, relu, kSoftplus, *batch);
    const double fd = (r0 - r1) / cfg.dt;
    INFO("fd " << fd << " dissipation " << d);
    REQUIRE(std::abs(fd - d) <= 0.1 * d + 1e-10);

    // scaling: residuals x c scales D by c^2
    std::vector<double> scaled(f.residuals().begin(), f.residuals().end());
    for (double& r : scaled) r *= 3.0;
    PotentialField f3(relu, std::make_shared<const Batch>(*batch), std::move(scaled));
    CHECK(dissipation(e, f3) == Catch::Approx(9.0 * d).epsilon(1e-12));

    PotentialField zero(relu, std::make_shared<const Batch>(*batch),
                        std::vector<double>(batch->size(), 0.0));
    CHECK(dissipation(e, zero) == 0.0);
}

TEST_CASE("lambda = 1/2 softplus stays at log 2 within noise") {
    DataModel model = step_model(2, 59);
    model.label.lambda = [](std::span<const double>) { return 0.5; };
    FlowConfig cfg;
    cfg.dt = 0.02;
    cfg.horizon = 1.0;
    cfg.batch_size = 1024;
    cfg.record_every = 10;
    const auto grid = make_probe_grid(64, 4, 61);
    const std::size_t m = 256;
    const auto rr = run(init_omni(m, 2, 67), cfg, model, kSoftplus, ActivationSpec{}, grid);
    const auto& rec = rr.record;
    // f* = 0 and f_{pi_0} ~ 0: risk should sit at log 2 within 3 combined sigmas,
    // sup_g within noise of 0 (batch noise + finite-m realization fluctuation)
    const double init_sigma = second_moment(init_omni(m, 2, 67)) / std::sqrt(static_cast<double>(m));
    for (std::size_t i = 0; i < rec.size(); ++i) {
        const double sigma = rec.risk_stderr[i] + 0.25 * init_sigma;
        REQUIRE(std::abs(rec.risk[i] - std::log(2.0)) <= 3.0 * sigma);
        const double supg_sigma =
            2.0 / std::sqrt(static_cast<double>(cfg.batch_size)) + 0.5 * init_sigma;
        REQUIRE(rec.sup_g[i] <= 3.0 * supg_sigma);
    }
}

TEST_CASE("non-finite updates abort with diagnostics") {
    DataModel model = step_model(2, 71);
    model.label.kind = LabelModel::Kind::regression;
    model.label.lambda = nullptr;
    model.label.target = [](std::span<const double> x) { return x[0]; };
    const LossModel square{LossModel::Kind::power, 2.0, std::nullopt};  // unbounded residuals
    FlowConfig cfg;
    cfg.dt = 1e3;  // wildly unstable on purpose
    cfg.horizon = 1e5;
    cfg.integrator = FlowConfig::Integrator::euler;
    cfg.batch_size = 32;
    cfg.record_every = 1000000;
    const auto grid = make_probe_grid(8, 4, 73);
    // leaky activation: the field cannot die on the inactive branch, so the
    // overshoot grows until it overflows
    CHECK_THROWS_AS(run(init_omni(32, 2, 79), cfg, model, square, ActivationSpec{0.1, false}, grid),
                    FlowAbort);
}

TEST_CASE("runs are deterministic and thread-count independent") {
    const DataModel model = step_model(2, 83);
    FlowConfig cfg;
    cfg.dt = 0.02;
    cfg.horizon = 0.5;
    cfg.batch_size = 128;
    cfg.record_every = 5;
    const auto grid = make_probe_grid(32, 4, 89);

    cfg.threads = 1;
    const auto a = run(init_omni(96, 2, 97), cfg, model, kSoftplus, ActivationSpec{}, grid);
    cfg.threads = 4;
    const auto b = run(init_omni(96, 2, 97), cfg, model, kSoftplus, ActivationSpec{}, grid);

    REQUIRE(a.record.size() == b.record.size());
    CHECK(a.record.risk == b.record.risk);
    CHECK(a.record.second_moment == b.record.second_moment);
    CHECK(a.record.sup_g == b.record.sup_g);
    CHECK(a.record.sup_V == b.record.sup_V);
    CHECK(a.record.dissipation == b.record.dissipation);
    CHECK(std::equal(a.final_state.positions().begin(), a.final_state.positions().end(),
                     b.final_state.positions().begin()));
}

TEST_CASE("m0 stamps are untouched by stepping") {
    const DataModel model = step_model(2, 101);
    const Ensemble e0 = init_omni(32, 2, 103);
    auto batch = std::make_shared<const Batch>(sample(model, 64, 1));
    auto builder = live_builder(e0, ActivationSpec{}, kSoftplus, batch);
    FlowConfig cfg;
    cfg.dt = 0.05;
    Ensemble e = e0;
    for (int k = 0; k < 5; ++k) e = step(e, cfg, builder);
    CHECK(std::equal(e0.m0().begin(), e0.m0().end(), e.m0().begin()));
}
