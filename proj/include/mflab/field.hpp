#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "mflab/common.hpp"
#include "mflab/data.hpp"
#include "mflab/loss.hpp"
#include "mflab/particle.hpp"

namespace mflab {

/// leak = 0 is ReLU; cutoff enables the smooth whole-space extension of the
/// activation (identical to the plain form on the closed cone).
struct ActivationSpec {
    double leak = 0.0;
    bool cutoff = false;
};

inline double sigma(const ActivationSpec& s, double z) { return z > 0.0 ? z : s.leak * z; }

// sigma'(0) := 0; any fixed convention agrees a.e. for admissible data.
inline double dsigma(const ActivationSpec& s, double z) {
    if (z > 0.0) return 1.0;
    if (z < 0.0) return s.leak;
    return 0.0;
}

namespace detail {

// Quintic smoothstep cutoff: eta = 1 on z <= 0, 0 on z >= 1/2, eta' <= 0, C^2.
inline double eta(double z) {
    if (z <= 0.0) return 1.0;
    if (z >= 0.5) return 0.0;
    const double u = 2.0 * z;
    return 1.0 - u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
}

inline double deta(double z) {
    if (z <= 0.0 || z >= 0.5) return 0.0;
    const double u = 2.0 * z;
    const double v = 1.0 - u;
    return -60.0 * u * u * v * v;
}

// Pairwise transform-reduce over [lo, hi); order fixed regardless of threads.
template <class F>
double pairwise_reduce(std::size_t lo, std::size_t hi, F&& term) {
    if (hi - lo <= 32) {
        double s = 0.0;
        for (std::size_t i = lo; i < hi; ++i) s += term(i);
        return s;
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    return pairwise_reduce(lo, mid, term) + pairwise_reduce(mid, hi, term);
}

inline double pairwise_sum_strided(const double* v, std::size_t count, std::size_t stride) {
    if (count <= 8) {
        double s = 0.0;
        for (std::size_t i = 0; i < count; ++i) s += v[i * stride];
        return s;
    }
    const std::size_t h = count / 2;
    return pairwise_sum_strided(v, h, stride) + pairwise_sum_strided(v + h * stride, count - h, stride);
}

}  // namespace detail

/// phi(theta; x) = a sigma(w.x + b); with cutoff, multiplied by
/// eta((a^2-|w|^2-b^2)/|theta|^2), which is 1 wherever minkowski >= 0.
inline double activation(const ActivationSpec& spec, std::span<const double> theta,
                         std::span<const double> x) {
    const std::size_t d = x.size();
    const double a = theta[0];
    double z = theta[d + 1];
    for (std::size_t k = 0; k < d; ++k) z += theta[k + 1] * x[k];
    double v = a * sigma(spec, z);
    if (spec.cutoff) {
        const double n2 = norm2(theta);
        if (n2 == 0.0) return 0.0;
        v *= detail::eta((2.0 * a * a - n2) / n2);
    }
    return v;
}

inline double activation(const ActivationSpec& spec, const Particle& p, std::span<const double> x) {
    std::vector<double> theta;
    theta.reserve(p.w.size() + 2);
    theta.push_back(p.a);
    theta.insert(theta.end(), p.w.begin(), p.w.end());
    theta.push_back(p.b);
    return activation(spec, theta, x);
}

/// Parameter gradient (sigma(z), a sigma'(z) x, a sigma'(z)), plus the
/// cutoff product-rule term when enabled. Zero at theta = 0.
inline void grad_activation(const ActivationSpec& spec, std::span<const double> theta,
                            std::span<const double> x, std::span<double> out) {
    const std::size_t d = x.size();
    const double a = theta[0];
    const double b = theta[d + 1];
    double z = b;
    for (std::size_t k = 0; k < d; ++k) z += theta[k + 1] * x[k];
    const double s = sigma(spec, z);
    const double sp = a * dsigma(spec, z);
    out[0] = s;
    for (std::size_t k = 0; k < d; ++k) out[k + 1] = sp * x[k];
    out[d + 1] = sp;
    if (!spec.cutoff) return;
    const double n2 = norm2(theta);
    if (n2 == 0.0) {
        for (auto& o : out) o = 0.0;
        return;
    }
    const double q = (2.0 * a * a - n2) / n2;
    const double e = detail::eta(q);
    const double de = detail::deta(q);
    if (de != 0.0) {
        // grad q = (2/n2)(a,-w,-b) - (2q/n2) theta
        const double c = 2.0 / n2 * de * a * s;
        out[0] = e * out[0] + c * (a - q * a);
        for (std::size_t k = 0; k < d; ++k) out[k + 1] = e * out[k + 1] + c * (-theta[k + 1] - q * theta[k + 1]);
        out[d + 1] = e * out[d + 1] + c * (-b - q * b);
    } else {
        for (auto& o : out) o *= e;
    }
}

inline std::vector<double> grad_activation(const ActivationSpec& spec, const Particle& p,
                                           std::span<const double> x) {
    std::vector<double> theta;
    theta.reserve(p.w.size() + 2);
    theta.push_back(p.a);
    theta.insert(theta.end(), p.w.begin(), p.w.end());
    theta.push_back(p.b);
    std::vector<double> out(theta.size());
    grad_activation(spec, theta, x, out);
    return out;
}

/// f_pi(x) = (1/m) sum phi(theta_i; x).
inline double realize(const ActivationSpec& spec, std::span<const double> positions,
                      std::size_t m, int dim, std::span<const double> x) {
    const std::size_t stride = static_cast<std::size_t>(dim) + 2;
    const double s = detail::pairwise_reduce(0, m, [&](std::size_t i) {
        return activation(spec, positions.subspan(i * stride, stride), x);
    });
    return s / static_cast<double>(m);
}

inline double realize(const Ensemble& e, const ActivationSpec& spec, std::span<const double> x) {
    return realize(spec, e.positions(), e.size(), e.dim(), x);
}

/// f_pi at every batch point; parallel over samples, per-sample reduction
/// order fixed.
inline void realize_batch(const ActivationSpec& spec, std::span<const double> positions,
                          std::size_t m, int dim, const Batch& batch, std::span<double> out,
                          int threads) {
    parallel_for(batch.size(), threads, [&](std::size_t j) {
        out[j] = realize(spec, positions, m, dim, batch.x(j));
    });
}

struct RiskEstimate {
    double value = 0.0;
    double stderr_ = 0.0;
};

inline RiskEstimate risk_estimate(const Ensemble& e, const ActivationSpec& spec,
                                  const LossModel& lm, const Batch& batch, int threads = 1) {
    std::vector<double> f(batch.size());
    realize_batch(spec, e.positions(), e.size(), e.dim(), batch, f, threads);
    std::vector<double> vals(batch.size());
    for (std::size_t j = 0; j < batch.size(); ++j) vals[j] = eval(lm, f[j], batch.ys[j]);
    auto ms = mean_stderr(vals);
    return {ms.value, ms.stderr_};
}

inline double risk(const Ensemble& e, const ActivationSpec& spec, const LossModel& lm,
                   const Batch& batch, int threads = 1) {
    return risk_estimate(e, spec, lm, batch, threads).value;
}

struct ProbeResult {
    double sup_g = 0.0;
    double sup_V = 0.0;
};

/// One field snapshot: the batch plus cached residuals r_j = d1(f(x_j), y_j).
/// potential/potential_grad evaluate delta_pi R and its theta-gradient under
/// this snapshot; both are pure, so one snapshot serves a whole step.
class PotentialField {
public:
    PotentialField(const Ensemble& e, const ActivationSpec& spec, const LossModel& lm,
                   std::shared_ptr<const Batch> batch, int threads = 1)
        : spec_(spec), batch_(std::move(batch)), threads_(threads) {
        std::vector<double> f(batch_->size());
        realize_batch(spec_, e.positions(), e.size(), e.dim(), *batch_, f, threads_);
        residuals_.resize(batch_->size());
        for (std::size_t j = 0; j < batch_->size(); ++j)
            residuals_[j] = d1(lm, f[j], batch_->ys[j]);
    }

    PotentialField(const Ensemble& e, const ActivationSpec& spec, const LossModel& lm,
                   Batch batch, int threads = 1)
        : PotentialField(e, spec, lm, std::make_shared<const Batch>(std::move(batch)), threads) {}

    PotentialField(ActivationSpec spec, std::shared_ptr<const Batch> batch,
                   std::vector<double> residuals)
        : spec_(spec), batch_(std::move(batch)), residuals_(std::move(residuals)) {
        if (residuals_.size() != batch_->size())
            throw std::invalid_argument("PotentialField: residuals/batch length mismatch");
    }

    PotentialField(ActivationSpec spec, Batch batch, std::vector<double> residuals)
        : PotentialField(spec, std::make_shared<const Batch>(std::move(batch)),
                         std::move(residuals)) {}

    const Batch& batch() const { return *batch_; }
    std::shared_ptr<const Batch> batch_ptr() const { return batch_; }
    std::span<const double> residuals() const { return residuals_; }
    const ActivationSpec& spec() const { return spec_; }
    int threads() const { return threads_; }
    void set_threads(int t) { threads_ = t; }

    double sup_residual() const {
        double s = 0.0;
        for (double r : residuals_) s = std::max(s, std::abs(r));
        return s;
    }

    // Test harness only: radial push V += eps |V| theta/|theta|.
    double perturb = 0.0;

    /// delta_pi R(theta) = mean_j r_j phi(theta; x_j); 2-homogeneous.
    double potential(std::span<const double> theta) const {
        const std::size_t d = static_cast<std::size_t>(batch_->dim);
        const double a = theta[0];
        const double b = theta[d + 1];
        double scale = a;
        if (spec_.cutoff) {
            const double n2 = norm2(theta);
            if (n2 == 0.0) return 0.0;
            scale *= detail::eta((2.0 * a * a - n2) / n2);
        }
        const double s = detail::pairwise_reduce(0, batch_->size(), [&](std::size_t j) {
            const double* x = &batch_->xs[j * d];
            double z = b;
            for (std::size_t k = 0; k < d; ++k) z += theta[k + 1] * x[k];
            return residuals_[j] * sigma(spec_, z);
        });
        return scale * s / static_cast<double>(batch_->size());
    }

    double potential(const Particle& p) const {
        std::vector<double> theta;
        theta.reserve(p.w.size() + 2);
        theta.push_back(p.a);
        theta.insert(theta.end(), p.w.begin(), p.w.end());
        theta.push_back(p.b);
        return potential(theta);
    }

    /// grad delta_pi R(theta) = mean_j r_j grad phi(theta; x_j); 1-homogeneous.
    void potential_grad(std::span<const double> theta, std::span<double> out) const {
        std::vector<double> scratch;
        grad_into(theta, out, scratch);
    }

    std::vector<double> potential_grad(const Particle& p) const {
        std::vector<double> theta;
        theta.reserve(p.w.size() + 2);
        theta.push_back(p.a);
        theta.insert(theta.end(), p.w.begin(), p.w.end());
        theta.push_back(p.b);
        std::vector<double> out(theta.size());
        potential_grad(theta, out);
        return out;
    }

    /// Velocity field for the whole ensemble: out row i = grad delta_pi R(theta_i).
    void velocities(std::span<const double> positions, std::size_t m, int dim,
                    std::span<double> out) const {
        const std::size_t stride = static_cast<std::size_t>(dim) + 2;
        parallel_for(m, threads_, [&](std::size_t i) {
            thread_local std::vector<double> scratch;
            grad_into(positions.subspan(i * stride, stride), out.subspan(i * stride, stride),
                      scratch);
        });
    }

    /// (1/m) sum delta_pi R(theta_i).
    double mean_potential(std::span<const double> positions, std::size_t m, int dim) const {
        const std::size_t stride = static_cast<std::size_t>(dim) + 2;
        std::vector<double> g(m);
        parallel_for(m, threads_, [&](std::size_t i) {
            g[i] = potential(positions.subspan(i * stride, stride));
        });
        return mean(g);
    }

    /// D = (1/m) sum |grad delta_pi R(theta_i)|^2.
    double dissipation(std::span<const double> positions, std::size_t m, int dim) const {
        const std::size_t stride = static_cast<std::size_t>(dim) + 2;
        std::vector<double> v(m * stride);
        velocities(positions, m, dim, v);
        std::vector<double> sq(m);
        for (std::size_t i = 0; i < m; ++i)
            sq[i] = norm2(std::span<const double>(v).subspan(i * stride, stride));
        return mean(sq);
    }

    /// sup over the grid of |g| and |grad g| (locally-uniform-convergence probe).
    ProbeResult probe_sup(std::span<const double> grid, int dim_theta) const {
        const std::size_t stride = static_cast<std::size_t>(dim_theta);
        const std::size_t k = grid.size() / stride;
        std::vector<double> gs(k), vs(k);
        parallel_for(k, threads_, [&](std::size_t i) {
            auto theta = grid.subspan(i * stride, stride);
            gs[i] = std::abs(potential(theta));
            thread_local std::vector<double> scratch;
            thread_local std::vector<double> v;
            v.resize(stride);
            grad_into(theta, v, scratch);
            vs[i] = norm(std::span<const double>(v));
        });
        ProbeResult r;
        for (std::size_t i = 0; i < k; ++i) {
            r.sup_g = std::max(r.sup_g, gs[i]);
            r.sup_V = std::max(r.sup_V, vs[i]);
        }
        return r;
    }

private:
    void grad_into(std::span<const double> theta, std::span<double> out,
                   std::vector<double>& scratch) const {
        const std::size_t d = static_cast<std::size_t>(batch_->dim);
        const std::size_t stride = d + 2;
        const std::size_t n = batch_->size();
        const double a = theta[0];
        const double b = theta[d + 1];

        // Block partials, combined pairwise per component.
        constexpr std::size_t kBlock = 256;
        const std::size_t nb = (n + kBlock - 1) / kBlock;
        scratch.assign(nb * stride, 0.0);
        for (std::size_t blk = 0; blk < nb; ++blk) {
            double* acc = &scratch[blk * stride];
            const std::size_t jhi = std::min(n, (blk + 1) * kBlock);
            for (std::size_t j = blk * kBlock; j < jhi; ++j) {
                const double* x = &batch_->xs[j * d];
                double z = b;
                for (std::size_t k = 0; k < d; ++k) z += theta[k + 1] * x[k];
                const double r = residuals_[j];
                const double s = sigma(spec_, z);
                if (s != 0.0) acc[0] += r * s;
                const double c = r * a * dsigma(spec_, z);
                if (c != 0.0) {
                    for (std::size_t k = 0; k < d; ++k) acc[k + 1] += c * x[k];
                    acc[d + 1] += c;
                }
            }
        }
        const double invn = 1.0 / static_cast<double>(n);
        for (std::size_t c = 0; c < stride; ++c)
            out[c] = invn * detail::pairwise_sum_strided(&scratch[c], nb, stride);

        if (spec_.cutoff) {
            const double n2 = norm2(theta);
            if (n2 == 0.0) {
                for (auto& o : out) o = 0.0;
                return;
            }
            const double q = (2.0 * a * a - n2) / n2;
            const double e = detail::eta(q);
            const double de = detail::deta(q);
            if (de != 0.0) {
                const double c = 2.0 / n2 * de * a * out[0];
                out[0] = e * out[0] + c * (a - q * a);
                for (std::size_t k = 1; k + 1 < stride; ++k)
                    out[k] = e * out[k] + c * (-theta[k] - q * theta[k]);
                out[stride - 1] = e * out[stride - 1] + c * (-b - q * b);
            } else if (e != 1.0) {
                for (auto& o : out) o *= e;
            }
        }

        if (perturb != 0.0) {
            const double tn = norm(theta);
            if (tn > 0.0) {
                const double vn = norm(std::span<const double>(out.data(), out.size()));
                const double c = perturb * vn / tn;
                for (std::size_t k = 0; k < stride; ++k) out[k] += c * theta[k];
            }
        }
    }

    ActivationSpec spec_;
    std::shared_ptr<const Batch> batch_;
    std::vector<double> residuals_;
    int threads_ = 1;
};

inline ProbeResult probe_sup(const PotentialField& f, std::span<const double> grid, int dim_theta) {
    return f.probe_sup(grid, dim_theta);
}

/// Random unit vectors in the closed cone (a^2 <= 1/2 on the unit sphere).
inline std::vector<double> make_probe_grid(std::size_t k, int dim_theta, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> grid;
    grid.reserve(k * static_cast<std::size_t>(dim_theta));
    while (grid.size() < k * static_cast<std::size_t>(dim_theta)) {
        auto v = rng.unit_vector(dim_theta);
        if (v[0] * v[0] <= 0.5) grid.insert(grid.end(), v.begin(), v.end());
    }
    return grid;
}

inline std::vector<double> load_probe_grid_csv(const std::string& path, int dim_theta) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open probe grid: " + path);
    std::vector<double> grid;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        if (static_cast<int>(row.size()) != dim_theta)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " +
                                     std::to_string(dim_theta) + " columns");
        const double n = norm(std::span<const double>(row));
        if (std::abs(n - 1.0) > 1e-6)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": row is not a unit vector");
        for (double& v : row) v /= n;
        grid.insert(grid.end(), row.begin(), row.end());
    }
    if (grid.empty()) throw std::runtime_error("empty probe grid: " + path);
    return grid;
}

}  // namespace mflab
