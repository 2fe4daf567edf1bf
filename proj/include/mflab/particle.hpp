#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mflab/common.hpp"
#include "mflab/rng.hpp"

namespace mflab {

/// One neuron theta = (a, w, b) together with the Minkowski norm recorded at
/// creation time, so later drift audits need no external t=0 state.
struct Particle {
    double a = 0.0;
    std::vector<double> w;
    double b = 0.0;
    double m0 = 0.0;

    int dim() const { return static_cast<int>(w.size()); }
    double norm2() const { return a * a + mflab::norm2(w) + b * b; }
};

inline double minkowski(const Particle& p) { return -p.a * p.a + norm2(std::span<const double>(p.w)) + p.b * p.b; }

inline Particle make_particle(double a, std::vector<double> w, double b) {
    Particle p{a, std::move(w), b, 0.0};
    p.m0 = minkowski(p);
    return p;
}

inline bool in_cone(const Particle& p, double tol) { return minkowski(p) >= -tol; }

// T(a,w,b) = (-a,w,b); m0 is recomputed (it equals the input's).
inline Particle sym_flip(const Particle& p) { return make_particle(-p.a, p.w, p.b); }

/// Empirical parameter measure pi_m = (1/m) sum delta_{theta_i}, uniform
/// weights throughout. Particles are stored as contiguous rows [a, w_0..w_{d-1}, b];
/// m0 values live in a parallel array and are never touched by integration.
class Ensemble {
public:
    Ensemble(int dim, std::size_t m)
        : dim_(dim), theta_(m * stride(), 0.0), m0_(m, 0.0) {
        if (dim < 1) throw std::invalid_argument("Ensemble: dim must be >= 1");
        if (m < 1) throw std::invalid_argument("Ensemble: m must be >= 1");
    }

    int dim() const { return dim_; }
    int stride() const { return dim_ + 2; }
    std::size_t size() const { return m0_.size(); }

    std::span<double> theta(std::size_t i) {
        return std::span<double>(theta_).subspan(i * stride(), stride());
    }
    std::span<const double> theta(std::size_t i) const {
        return std::span<const double>(theta_).subspan(i * stride(), stride());
    }
    std::span<double> positions() { return theta_; }
    std::span<const double> positions() const { return theta_; }
    std::span<const double> m0() const { return m0_; }

    Particle particle(std::size_t i) const {
        auto t = theta(i);
        Particle p;
        p.a = t[0];
        p.w.assign(t.begin() + 1, t.end() - 1);
        p.b = t[stride() - 1];
        p.m0 = m0_[i];
        return p;
    }

    void set_particle(std::size_t i, const Particle& p) {
        if (p.dim() != dim_) throw std::invalid_argument("set_particle: dimension mismatch");
        auto t = theta(i);
        t[0] = p.a;
        for (int k = 0; k < dim_; ++k) t[1 + static_cast<std::size_t>(k)] = p.w[static_cast<std::size_t>(k)];
        t[static_cast<std::size_t>(stride()) - 1] = p.b;
        m0_[i] = p.m0;
    }

    // Refresh every m0 from the current coordinates (creation-time stamp).
    void stamp_m0() {
        for (std::size_t i = 0; i < size(); ++i) {
            auto t = theta(i);
            double ww = 0.0;
            for (int k = 1; k < stride() - 1; ++k) ww += t[static_cast<std::size_t>(k)] * t[static_cast<std::size_t>(k)];
            m0_[i] = -t[0] * t[0] + ww + t[static_cast<std::size_t>(stride()) - 1] * t[static_cast<std::size_t>(stride()) - 1];
        }
    }

    std::uint64_t seed = 0;

    void save_csv(const std::string& path) const;
    static Ensemble load_csv(const std::string& path);

private:
    int dim_;
    std::vector<double> theta_;
    std::vector<double> m0_;
};

/// a ~ U[-1,1] and (w,b) ~ U(S^d) independently, so a^2 <= 1 = |w|^2+b^2 and
/// every particle starts inside the closed cone.
inline Ensemble init_omni(std::size_t m, int d, std::uint64_t seed) {
    Ensemble e(d, m);
    e.seed = seed;
    Rng rng(seed);
    for (std::size_t i = 0; i < m; ++i) {
        const double a = rng.uniform(-1.0, 1.0);
        std::vector<double> wb = rng.unit_vector(d + 1);
        auto t = e.theta(i);
        t[0] = a;
        for (int k = 0; k <= d; ++k) t[1 + static_cast<std::size_t>(k)] = wb[static_cast<std::size_t>(k)];
    }
    e.stamp_m0();
    return e;
}

/// Cone-interior initializer with every neuron active on the unit ball:
/// b - |w| >= margin > |a|, so w.x + b stays positive for |x| <= 1 and the
/// batch field is smooth along short horizons. Used by order-of-convergence
/// studies that need a kink-free trajectory tube.
inline Ensemble init_active(std::size_t m, int d, std::uint64_t seed, double margin = 2.0) {
    Ensemble e(d, m);
    e.seed = seed;
    Rng rng(seed);
    for (std::size_t i = 0; i < m; ++i) {
        const double a = rng.uniform(-1.0, 1.0);
        auto w = rng.unit_vector(d);
        const double wscale = 0.3 * rng.uniform();
        auto t = e.theta(i);
        t[0] = a;
        for (int k = 0; k < d; ++k) t[1 + static_cast<std::size_t>(k)] = wscale * w[static_cast<std::size_t>(k)];
        t[static_cast<std::size_t>(d) + 1] = margin + 0.3 + rng.uniform();
    }
    e.stamp_m0();
    return e;
}

/// N(pi) = (1/m) sum |theta_i|^2.
inline double second_moment(const Ensemble& e) {
    std::vector<double> v(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) v[i] = norm2(e.theta(i));
    return mean(v);
}

/// Path-norm upper estimate (1/m) sum |a_i| (|w_i| + |b_i|).
inline double barron_estimate(const Ensemble& e) {
    std::vector<double> v(e.size());
    const int s = e.stride();
    for (std::size_t i = 0; i < e.size(); ++i) {
        auto t = e.theta(i);
        const double wn = norm(t.subspan(1, static_cast<std::size_t>(s) - 2));
        v[i] = std::abs(t[0]) * (wn + std::abs(t[static_cast<std::size_t>(s) - 1]));
    }
    return mean(v);
}

/// Sphere-projected quadratic measure mu = P^S_#(|theta|^2 pi): one atom
/// (theta/|theta|, |theta|^2/m) per nonzero particle.
struct SphereMeasure {
    int dim_theta = 0;  // ambient dimension d+2
    std::vector<std::vector<double>> directions;
    std::vector<double> masses;

    std::size_t size() const { return masses.size(); }
    double total_mass() const { return pairwise_sum(masses); }
};

inline SphereMeasure sphere_project(const Ensemble& e) {
    SphereMeasure s;
    s.dim_theta = e.stride();
    const double invm = 1.0 / static_cast<double>(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
        auto t = e.theta(i);
        const double n2 = norm2(t);
        if (n2 == 0.0) continue;  // theta = 0 carries no atom
        const double n = std::sqrt(n2);
        std::vector<double> dir(t.begin(), t.end());
        for (double& x : dir) x /= n;
        s.directions.push_back(std::move(dir));
        s.masses.push_back(n2 * invm);
    }
    return s;
}

/// Rebuilds a uniform-weight ensemble realizing the same function as the
/// cone-supported measure: atom (dir, mass) becomes the particle
/// dir * sqrt(K * mass), so (1/K) phi(theta_k; x) = mass_k phi(dir_k; x)
/// by two-homogeneity. An empty measure becomes the single zero particle.
inline Ensemble reparametrize_minimizer(const SphereMeasure& s, int fallback_dim = 1) {
    const int dim_theta = s.dim_theta > 0 ? s.dim_theta : fallback_dim + 2;
    const int d = dim_theta - 2;
    if (s.size() == 0 || s.total_mass() == 0.0) {
        Ensemble e(d, 1);
        e.stamp_m0();
        return e;
    }
    const std::size_t k = s.size();
    Ensemble e(d, k);
    for (std::size_t i = 0; i < k; ++i) {
        const double scale = std::sqrt(static_cast<double>(k) * s.masses[i]);
        auto t = e.theta(i);
        for (int c = 0; c < dim_theta; ++c) t[static_cast<std::size_t>(c)] = scale * s.directions[i][static_cast<std::size_t>(c)];
    }
    e.stamp_m0();
    return e;
}

inline void Ensemble::save_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "a";
    for (int k = 1; k <= dim_; ++k) out << ",w_" << k;
    out << ",b,m0\n";
    for (std::size_t i = 0; i < size(); ++i) {
        auto t = theta(i);
        for (int c = 0; c < stride(); ++c) {
            if (c) out << ',';
            out << fmt17(t[static_cast<std::size_t>(c)]);
        }
        out << ',' << fmt17(m0_[i]) << '\n';
    }
}

inline Ensemble Ensemble::load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::string header;
    if (!std::getline(in, header)) throw std::runtime_error("empty ensemble file: " + path);
    int cols = 1;
    for (char c : header) cols += (c == ',');
    const int d = cols - 3;  // a, w_1..w_d, b, m0
    if (d < 1) throw std::runtime_error("bad ensemble header in " + path);

    std::vector<double> theta;
    std::vector<double> m0;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        if (static_cast<int>(row.size()) != cols) throw std::runtime_error("ragged row in " + path);
        theta.insert(theta.end(), row.begin(), row.end() - 1);
        m0.push_back(row.back());
    }
    if (m0.empty()) throw std::runtime_error("no particles in " + path);
    Ensemble e(d, m0.size());
    std::copy(theta.begin(), theta.end(), e.positions().begin());
    for (std::size_t i = 0; i < m0.size(); ++i) e.m0_[i] = m0[i];
    return e;
}

}  // namespace mflab
