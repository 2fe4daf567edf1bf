#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mflab/field.hpp"
#include "mflab/particle.hpp"
#include "mflab/rng.hpp"

using namespace mflab;

TEST_CASE("minkowski norm") {
    CHECK(minkowski(make_particle(1.0, {1.0, 0.0}, 0.0)) == 0.0);
    CHECK(minkowski(make_particle(0.0, {0.0, 0.0}, 0.0)) == 0.0);
    CHECK(minkowski(make_particle(1.0, {2.0, 0.0}, 1.0)) == 4.0);
}

TEST_CASE("in_cone closure with tolerance") {
    CHECK(in_cone(make_particle(1.0, {1.0, 0.0}, 0.0), 0.0));
    CHECK_FALSE(in_cone(make_particle(2.0, {1.0, 0.0}, 0.0), 0.0));
    CHECK(in_cone(make_particle(2.0, {1.0, 0.0}, 0.0), 10.0));
}

TEST_CASE("sym_flip is an involution and preserves minkowski") {
    const Particle p = make_particle(1.0, {1.0, 0.0}, 0.0);
    const Particle q = sym_flip(p);
    CHECK(q.a == -1.0);
    CHECK(q.w == p.w);
    CHECK(q.b == p.b);
    CHECK(q.m0 == p.m0);
    const Particle r = sym_flip(q);
    CHECK(r.a == p.a);
    Rng rng(7);
    for (int i = 0; i < 100; ++i) {
        Particle x = make_particle(rng.normal(), {rng.normal(), rng.normal()}, rng.normal());
        CHECK(minkowski(sym_flip(x)) == minkowski(x));
    }
}

TEST_CASE("init_omni stays in the cone and is reproducible") {
    const Ensemble e = init_omni(20000, 2, 11);
    double worst = 1.0;
    for (std::size_t i = 0; i < e.size(); ++i) {
        worst = std::min(worst, minkowski(e.particle(i)));
        CHECK(e.particle(i).m0 >= 0.0);
    }
    CHECK(worst >= 0.0);

    const Ensemble e2 = init_omni(20000, 2, 11);
    CHECK(std::equal(e.positions().begin(), e.positions().end(), e2.positions().begin()));
}

TEST_CASE("init_omni second moment matches the closed-form mean") {
    // E[a^2] = 1/3 for a ~ U[-1,1]; |w|^2 + b^2 = 1, so E N = 4/3
    const Ensemble e = init_omni(100000, 2, 3);
    CHECK(second_moment(e) == Catch::Approx(4.0 / 3.0).margin(0.01));
}

TEST_CASE("init_omni puts mass in narrow open cones") {
    const Ensemble e = init_omni(100000, 2, 5);
    // fixed cone-interior direction
    std::vector<double> u = {0.5, 0.5, 0.5, 0.5};
    std::size_t hits = 0;
    for (std::size_t i = 0; i < e.size(); ++i) {
        auto t = e.theta(i);
        if (dot(t, u) > 0.99 * norm(t)) ++hits;
    }
    CHECK(hits > 0);
}

TEST_CASE("second moment examples") {
    Ensemble single(2, 1);
    single.set_particle(0, make_particle(1.0, {1.0, 0.0}, 0.0));
    CHECK(second_moment(single) == 2.0);

    Ensemble zeros(2, 4);
    CHECK(second_moment(zeros) == 0.0);
}

TEST_CASE("barron estimate and its invariances") {
    Ensemble single(2, 1);
    single.set_particle(0, make_particle(1.0, {1.0, 0.0}, 0.0));
    CHECK(barron_estimate(single) == 1.0);

    Ensemble e = init_omni(256, 2, 9);
    const double before = barron_estimate(e);

    Ensemble flipped = e;
    for (std::size_t i = 0; i < e.size(); ++i) flipped.set_particle(i, sym_flip(e.particle(i)));
    CHECK(barron_estimate(flipped) == before);

    Ensemble scaled = e;
    Rng rng(13);
    for (std::size_t i = 0; i < e.size(); ++i) {
        Particle p = e.particle(i);
        const double lambda = std::exp(rng.uniform(-1.0, 1.0));
        p.a *= lambda;
        for (double& w : p.w) w /= lambda;
        p.b /= lambda;
        p.m0 = minkowski(p);
        scaled.set_particle(i, p);
    }
    CHECK(barron_estimate(scaled) == Catch::Approx(before).epsilon(1e-12));
}

TEST_CASE("sphere projection basics") {
    Ensemble single(2, 1);
    single.set_particle(0, make_particle(1.0, {1.0, 0.0}, 0.0));
    const SphereMeasure s = sphere_project(single);
    REQUIRE(s.size() == 1);
    CHECK(s.masses[0] == 2.0);
    const double is2 = 1.0 / std::sqrt(2.0);
    CHECK(s.directions[0][0] == Catch::Approx(is2).epsilon(1e-15));
    CHECK(s.directions[0][1] == Catch::Approx(is2).epsilon(1e-15));
    CHECK(s.directions[0][2] == 0.0);
    CHECK(s.directions[0][3] == 0.0);

    Ensemble zeros(2, 3);
    CHECK(sphere_project(zeros).size() == 0);
}

TEST_CASE("escaping mass projects to a constant sphere measure") {
    // pi_n = (1/n) delta_{sqrt(n) e_1} + (1 - 1/n) delta_0
    for (std::size_t n : {2, 4, 8}) {
        Ensemble e(1, n);
        e.set_particle(0, make_particle(std::sqrt(static_cast<double>(n)), {0.0}, 0.0));
        const SphereMeasure s = sphere_project(e);
        REQUIRE(s.size() == 1);
        CHECK(s.masses[0] == Catch::Approx(1.0).epsilon(1e-15));
        CHECK(s.directions[0][0] == Catch::Approx(1.0).epsilon(1e-15));
        CHECK(std::abs(s.directions[0][1]) == 0.0);
        CHECK(std::abs(s.directions[0][2]) == 0.0);
    }
}

TEST_CASE("reparametrize: empty measure becomes the zero particle") {
    SphereMeasure s;
    s.dim_theta = 4;
    const Ensemble e = reparametrize_minimizer(s);
    REQUIRE(e.size() == 1);
    for (double c : e.theta(0)) CHECK(c == 0.0);
}

TEST_CASE("reparametrize realizes a single atom") {
    SphereMeasure s;
    s.dim_theta = 4;
    const double is2 = 1.0 / std::sqrt(2.0);
    s.directions = {{is2, is2, 0.0, 0.0}};
    s.masses = {2.0};
    const Ensemble e = reparametrize_minimizer(s);
    REQUIRE(e.size() == 1);

    Ensemble ref(2, 1);
    ref.set_particle(0, make_particle(1.0, {1.0, 0.0}, 0.0));
    const ActivationSpec relu;
    Rng rng(21);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> x = {rng.normal(), rng.normal()};
        CHECK(realize(e, relu, x) == Catch::Approx(realize(ref, relu, x)).margin(1e-12));
    }
}

TEST_CASE("sphere_project / reparametrize round trip preserves the realization") {
    Ensemble e = init_omni(128, 2, 33);
    // mix in zero particles
    e.set_particle(3, make_particle(0.0, {0.0, 0.0}, 0.0));
    e.set_particle(77, make_particle(0.0, {0.0, 0.0}, 0.0));
    const Ensemble back = reparametrize_minimizer(sphere_project(e), e.dim());

    const ActivationSpec relu;
    const double n2 = second_moment(e);
    Rng rng(34);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> x = {rng.normal(), rng.normal()};
        worst = std::max(worst, std::abs(realize(e, relu, x) - realize(back, relu, x)));
    }
    CHECK(worst <= 1e-10 * (1.0 + n2));
}

TEST_CASE("ensemble CSV round trip is exact") {
    Ensemble e = init_omni(64, 3, 77);
    const auto path = std::filesystem::temp_directory_path() / "mflab_test_ensemble.csv";
    e.save_csv(path.string());
    const Ensemble back = Ensemble::load_csv(path.string());
    REQUIRE(back.size() == e.size());
    REQUIRE(back.dim() == e.dim());
    CHECK(std::equal(e.positions().begin(), e.positions().end(), back.positions().begin()));
    CHECK(std::equal(e.m0().begin(), e.m0().end(), back.m0().begin()));
    std::filesystem::remove(path);
}

TEST_CASE("rng streams are deterministic and distinct") {
    Rng a(42, 1), b(42, 1), c(42, 2);
    bool same = true, differ = false;
    for (int i = 0; i < 64; ++i) {
        const double x = a.uniform();
        same = same && (x == b.uniform());
        differ = differ || (x != c.uniform());
    }
    CHECK(same);
    CHECK(differ);
}
