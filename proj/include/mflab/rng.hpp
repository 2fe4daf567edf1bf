#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

namespace mflab {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& s) {
    s += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}
}  // namespace detail

// Counter-seeded generator: (seed, stream) fully determines the sequence.
// All sampling goes through explicit transforms (never the implementation-
// defined std distributions) so draws are identical across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
        std::uint64_t s = seed;
        std::uint64_t a = detail::splitmix64(s);
        s ^= stream * 0xD1B54A32D192ED03ULL + 0x2545F4914F6CDD1DULL;
        std::uint64_t b = detail::splitmix64(s);
        gen_.seed(a ^ (b << 1));
    }

    std::uint64_t next_u64() { return gen_(); }

    // Uniform on [0,1) with 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    // Box-Muller; exactly two uniforms per pair of normals.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0,1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

    void normal_fill(std::span<double> out) {
        for (double& x : out) x = normal();
    }

    // Uniform on the unit sphere S^{dim-1}.
    std::vector<double> unit_vector(int dim) {
        std::vector<double> v(static_cast<std::size_t>(dim));
        double n2 = 0.0;
        do {
            normal_fill(v);
            n2 = 0.0;
            for (double x : v) n2 += x * x;
        } while (n2 < 1e-24);
        const double inv = 1.0 / std::sqrt(n2);
        for (double& x : v) x *= inv;
        return v;
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stream-id conventions; flow batches use 1 + step index.
inline constexpr std::uint64_t kStreamPool = 0;
inline constexpr std::uint64_t kStreamMbr = 1ULL << 40;
inline constexpr std::uint64_t kStreamAdmissibleX = (1ULL << 40) + 1;
inline constexpr std::uint64_t kStreamAdmissiblePairs = (1ULL << 40) + 2;
inline constexpr std::uint64_t kStreamFirstMoment = (1ULL << 40) + 3;

}  // namespace mflab
