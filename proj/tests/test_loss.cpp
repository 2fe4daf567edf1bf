#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mflab/loss.hpp"
#include "mflab/rng.hpp"

using namespace mflab;

namespace {
LossModel huber() { return {LossModel::Kind::huber, 2.0, std::nullopt}; }
LossModel pseudo() { return {LossModel::Kind::pseudo_huber, 2.0, std::nullopt}; }
LossModel softplus() { return {LossModel::Kind::softplus, 2.0, std::nullopt}; }
LossModel power(double p) { return {LossModel::Kind::power, p, std::nullopt}; }
}  // namespace

TEST_CASE("pointwise loss values") {
    CHECK(eval(huber(), 0.0, 2.0) == 1.5);
    CHECK(d1(huber(), 0.0, 2.0) == -1.0);
    for (double y : {-3.0, -0.25, 0.0, 1.5, 10.0}) CHECK(eval(pseudo(), y, y) == 0.0);
    CHECK(eval(softplus(), 0.0, 1.0) == Catch::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(d1(softplus(), 0.0, 1.0) == Catch::Approx(-0.5).epsilon(1e-15));
}

TEST_CASE("clipped loss: interior branch and affine extension") {
    LossModel lm = power(2.0);
    lm.clip = 1.0;
    // inside |y| <= S the clip is the identity
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const double y = rng.uniform(-1.0, 1.0);
        const double yp = rng.uniform(-3.0, 3.0);
        LossModel plain = power(2.0);
        CHECK(eval(lm, y, yp) == eval(plain, y, yp));
    }
    // affine branch: l(1,0) + l'(1,0)(3-1) = 1/2 + 1*2
    CHECK(clip_eval(lm, 3.0, 0.0) == 2.5);
}

TEST_CASE("clipped loss: one-sided finite differences at the seam") {
    for (auto kind : {LossModel::Kind::power, LossModel::Kind::pseudo_huber}) {
        LossModel lm{kind, 3.0, 2.0};
        const double s = *lm.clip;
        const double yp = -0.7;
        const double slope = detail::raw_d1(lm, s, yp);
        for (double h : {1e-3, 1e-4}) {
            const double above = (clip_eval(lm, s + h, yp) - clip_eval(lm, s, yp)) / h;
            const double below = (clip_eval(lm, s, yp) - clip_eval(lm, s - h, yp)) / h;
            CHECK(std::abs(above - slope) <= 10.0 * h);
            CHECK(std::abs(below - slope) <= 10.0 * h);
        }
    }
}

TEST_CASE("convexity in the first slot") {
    Rng rng(17);
    for (auto lm : {huber(), pseudo(), softplus(), power(1.5)}) {
        for (int i = 0; i < 1000; ++i) {
            const double y0 = rng.uniform(-5.0, 5.0);
            const double y1 = rng.uniform(-5.0, 5.0);
            const double yp = lm.kind == LossModel::Kind::softplus
                                  ? (rng.uniform() < 0.5 ? 1.0 : -1.0)
                                  : rng.uniform(-5.0, 5.0);
            const double t = rng.uniform();
            const double lhs = eval(lm, t * y0 + (1.0 - t) * y1, yp);
            const double rhs = t * eval(lm, y0, yp) + (1.0 - t) * eval(lm, y1, yp);
            REQUIRE(lhs <= rhs + 1e-12);
        }
    }
}

TEST_CASE("uniform derivative bound for Lipschitz losses") {
    Rng rng(19);
    for (auto lm : {huber(), pseudo(), softplus()}) {
        double worst = 0.0;
        for (int i = 0; i < 1000000; ++i) {
            const double y = rng.uniform(-50.0, 50.0);
            const double yp = lm.kind == LossModel::Kind::softplus
                                  ? (i % 2 == 0 ? 1.0 : -1.0)
                                  : rng.uniform(-50.0, 50.0);
            worst = std::max(worst, std::abs(d1(lm, y, yp)));
        }
        REQUIRE(worst <= 1.0);
    }
}

TEST_CASE("d1 matches central differences away from the huber kink") {
    Rng rng(23);
    const double h = 1e-5;
    for (auto lm : {huber(), pseudo(), softplus(), power(2.5)}) {
        for (int i = 0; i < 500; ++i) {
            const double y = rng.uniform(-4.0, 4.0);
            const double yp = lm.kind == LossModel::Kind::softplus
                                  ? (rng.uniform() < 0.5 ? 1.0 : -1.0)
                                  : rng.uniform(-4.0, 4.0);
            if (lm.kind == LossModel::Kind::huber && std::abs(std::abs(y - yp) - 1.0) < 10.0 * h)
                continue;
            if (lm.kind == LossModel::Kind::power && std::abs(y - yp) < 0.1) continue;
            const double fd = (eval(lm, y + h, yp) - eval(lm, y - h, yp)) / (2.0 * h);
            REQUIRE(d1(lm, y, yp) == Catch::Approx(fd).margin(1e-7));
        }
    }
}

TEST_CASE("bayes optimal for softplus binary labels") {
    LabelModel half;
    half.kind = LabelModel::Kind::binary;
    half.lambda = [](std::span<const double>) { return 0.5; };
    auto f_half = bayes_optimal(softplus(), half);
    REQUIRE(f_half.has_value());
    std::vector<double> x = {0.3, -0.2};
    CHECK(f_half->f(x) == Catch::Approx(0.0).margin(1e-15));

    LabelModel point9;
    point9.kind = LabelModel::Kind::binary;
    point9.lambda = [](std::span<const double>) { return 0.9; };
    auto f9 = bayes_optimal(softplus(), point9);
    REQUIRE(f9.has_value());
    CHECK(f9->f(x) == Catch::Approx(std::log(9.0)).epsilon(1e-12));

    // cross-check against direct 1-D minimization of the augmented loss
    const CondLaw law{{1.0, -1.0}, {0.9, 0.1}};
    CHECK(minimize_augmented(softplus(), law) == Catch::Approx(std::log(9.0)).margin(1e-6));
}

TEST_CASE("huber with P^x = (delta_{-2} + delta_{+2})/2 has a flat minimizer interval") {
    const CondLaw law{{-2.0, 2.0}, {0.5, 0.5}};
    const double base = augmented_loss(huber(), law, 0.0);
    for (double alpha = -0.9; alpha <= 0.9; alpha += 0.05)
        CHECK(std::abs(augmented_loss(huber(), law, alpha) - base) < 1e-8);
}

TEST_CASE("mbr estimates") {
    DataModel m;
    m.dim = 2;
    m.seed = 101;
    m.input.kind = InputLaw::Kind::uniform_sphere;
    m.input.radius = 1.0;
    m.label.kind = LabelModel::Kind::binary;
    m.label.lambda = [](std::span<const double>) { return 0.5; };

    const std::size_t n = 40000;
    auto est = mbr_estimate(softplus(), m, n);
    CHECK(est.value == Catch::Approx(std::log(2.0)).margin(3.0 * est.stderr_ + 1e-12));
    CHECK(est.stderr_ <= 2.0 / std::sqrt(static_cast<double>(n)));

    m.label.lambda = [](std::span<const double>) { return 0.9; };
    est = mbr_estimate(softplus(), m, n);
    const double exact = 0.9 * std::log(10.0 / 9.0) + 0.1 * std::log(10.0);
    CHECK(est.value == Catch::Approx(exact).margin(3.0 * est.stderr_));

    // perfect regression fit: pseudo-huber with zero noise
    DataModel reg = m;
    reg.label.kind = LabelModel::Kind::regression;
    reg.label.lambda = nullptr;
    reg.label.target = [](std::span<const double> x) { return x[0]; };
    reg.label.noise = LabelModel::Noise::none;
    est = mbr_estimate(pseudo(), reg, 1000);
    CHECK(est.value == 0.0);
}

TEST_CASE("mbr not attained by finite f*") {
    DataModel m;
    m.dim = 1;
    m.seed = 7;
    m.input.kind = InputLaw::Kind::uniform_sphere;
    m.label.kind = LabelModel::Kind::binary;
    m.label.lambda = [](std::span<const double> x) { return x[0] > 0.0 ? 1.0 : 0.5; };
    CHECK_THROWS_WITH(mbr_estimate(softplus(), m, 2000),
                      Catch::Matchers::ContainsSubstring("not attained"));
}
