#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mflab/common.hpp"
#include "mflab/field.hpp"
#include "mflab/flow.hpp"

namespace mflab {

// Verdict thresholds. The convergence criterion itself is qualitative; these
// cutoffs are engineering choices and are logged into every report.
inline constexpr double kGapSigmas = 3.0;
inline constexpr double kStalledSlopeTol = -0.01;
inline constexpr double kSupgFloor = 1e-9;
inline constexpr std::size_t kFinalRiskWindow = 5;

struct ConvergenceReport {
    enum class Verdict { converging_to_mbr, stalled, growing_moments, inconclusive };

    double mbr = 0.0;
    double mbr_stderr = 0.0;
    double final_risk = 0.0;
    double final_risk_stderr = 0.0;
    double final_gap = 0.0;
    double gap_sigma = 0.0;
    double supg_slope = 0.0;   // LS slope of log sup_g over the last half
    double supg_max = 0.0;
    double supg_final = 0.0;
    double bound_excess_max = 0.0;  // max_t [N(t) - sublinear bound - slack]
    std::optional<double> frozen_log_n_slope;
    Verdict verdict = Verdict::inconclusive;

    static const char* name(Verdict v) {
        switch (v) {
            case Verdict::converging_to_mbr: return "converging-to-MBR";
            case Verdict::stalled: return "stalled";
            case Verdict::growing_moments: return "growing-moments";
            default: return "inconclusive";
        }
    }

    void save_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot open for writing: " + path);
        out << "key,value\n";
        out << "mbr," << fmt17(mbr) << "\n";
        out << "mbr_stderr," << fmt17(mbr_stderr) << "\n";
        out << "final_risk," << fmt17(final_risk) << "\n";
        out << "final_risk_stderr," << fmt17(final_risk_stderr) << "\n";
        out << "final_gap," << fmt17(final_gap) << "\n";
        out << "gap_sigma," << fmt17(gap_sigma) << "\n";
        out << "supg_slope," << fmt17(supg_slope) << "\n";
        out << "supg_max," << fmt17(supg_max) << "\n";
        out << "supg_final," << fmt17(supg_final) << "\n";
        out << "bound_excess_max," << fmt17(bound_excess_max) << "\n";
        if (frozen_log_n_slope) out << "frozen_log_n_slope," << fmt17(*frozen_log_n_slope) << "\n";
        out << "threshold_gap_sigmas," << fmt17(kGapSigmas) << "\n";
        out << "threshold_stalled_slope," << fmt17(kStalledSlopeTol) << "\n";
        out << "threshold_supg_floor," << fmt17(kSupgFloor) << "\n";
        out << "verdict," << name(verdict) << "\n";
    }
};

/// Slack granted to the moment bound N(t) <= 2[N(0) + R(0) t]: three sigmas
/// of the risk estimate propagated through the bound, plus an integrator
/// allowance.
inline double sublinear_bound_slack(const TrajectoryRecord& rec, double t) {
    const double se0 = rec.risk_stderr.empty() ? 0.0 : rec.risk_stderr.front();
    return 3.0 * (2.0 * t * se0) + rec.dt * (1.0 + t);
}

/// Max excess of N(t) over the sublinear bound (positive = violation).
inline double sublinear_bound_excess(const TrajectoryRecord& rec) {
    if (rec.size() == 0) return 0.0;
    const double n0 = rec.second_moment.front();
    const double r0 = rec.risk.front();
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < rec.size(); ++i) {
        const double t = rec.times[i];
        const double bound = 2.0 * (n0 + r0 * t) + sublinear_bound_slack(rec, t);
        worst = std::max(worst, rec.second_moment[i] - bound);
    }
    return worst;
}

/// Worst violation of the refined pairwise bound
/// N(t) <= 2[N(T) + (t-T)(R(T)-R(t))] over all recorded T < t.
inline double pairwise_bound_excess(const TrajectoryRecord& rec) {
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < rec.size(); ++a) {
        for (std::size_t b = a + 1; b < rec.size(); ++b) {
            const double span = rec.times[b] - rec.times[a];
            const double bound = 2.0 * (rec.second_moment[a] +
                                        span * (rec.risk[a] - rec.risk[b]));
            const double se = std::sqrt(rec.risk_stderr[a] * rec.risk_stderr[a] +
                                        rec.risk_stderr[b] * rec.risk_stderr[b]);
            const double slack = 3.0 * 2.0 * span * se + rec.dt * (1.0 + span);
            worst = std::max(worst, rec.second_moment[b] - (bound + slack));
        }
    }
    return worst;
}

inline ConvergenceReport convergence_report(const TrajectoryRecord& rec, double mbr,
                                            double mbr_stderr) {
    ConvergenceReport rep;
    rep.mbr = mbr;
    rep.mbr_stderr = mbr_stderr;
    if (rec.size() < 2) {
        rep.verdict = ConvergenceReport::Verdict::inconclusive;
        return rep;
    }

    // final risk: average of the trailing window (independent batches)
    const std::size_t k = std::min(kFinalRiskWindow, rec.size());
    double acc = 0.0, var = 0.0;
    for (std::size_t i = rec.size() - k; i < rec.size(); ++i) {
        acc += rec.risk[i];
        var += rec.risk_stderr[i] * rec.risk_stderr[i];
    }
    rep.final_risk = acc / static_cast<double>(k);
    rep.final_risk_stderr = std::sqrt(var) / static_cast<double>(k);
    rep.final_gap = rep.final_risk - mbr;
    rep.gap_sigma = std::sqrt(rep.final_risk_stderr * rep.final_risk_stderr +
                              mbr_stderr * mbr_stderr);

    // sup_g trend over the last half of the record
    const std::size_t half = rec.size() / 2;
    std::vector<double> ts(rec.times.begin() + half, rec.times.end());
    std::vector<double> logg;
    logg.reserve(ts.size());
    for (std::size_t i = half; i < rec.size(); ++i)
        logg.push_back(std::log(std::max(rec.sup_g[i], 1e-300)));
    rep.supg_slope = least_squares_slope(ts, logg);
    rep.supg_max = *std::max_element(rec.sup_g.begin(), rec.sup_g.end());
    rep.supg_final = rec.sup_g.back();

    rep.bound_excess_max = sublinear_bound_excess(rec);

    if (rec.freeze_time) {
        std::vector<double> ft, fn;
        for (std::size_t i = 0; i < rec.size(); ++i) {
            if (rec.times[i] >= *rec.freeze_time) {
                ft.push_back(rec.times[i]);
                fn.push_back(std::log(std::max(rec.second_moment[i], 1e-300)));
            }
        }
        if (ft.size() >= 2) rep.frozen_log_n_slope = least_squares_slope(ft, fn);
    }

    if (rep.bound_excess_max > 0.0) {
        rep.verdict = ConvergenceReport::Verdict::growing_moments;
    } else if (std::abs(rep.final_gap) <= kGapSigmas * rep.gap_sigma && rep.supg_slope < 0.0) {
        rep.verdict = ConvergenceReport::Verdict::converging_to_mbr;
    } else if (rep.final_gap > kGapSigmas * rep.gap_sigma && rep.supg_slope >= kStalledSlopeTol &&
               rep.supg_final >= kSupgFloor) {
        rep.verdict = ConvergenceReport::Verdict::stalled;
    } else {
        rep.verdict = ConvergenceReport::Verdict::inconclusive;
    }
    return rep;
}

struct GapPoint {
    double t = 0.0;
    double gap = 0.0;
    double sigma = 0.0;
};

/// risk(t) - mbr with combined standard error.
inline std::vector<GapPoint> mbr_gap(const TrajectoryRecord& rec, double mbr, double mbr_stderr) {
    std::vector<GapPoint> out;
    out.reserve(rec.size());
    for (std::size_t i = 0; i < rec.size(); ++i) {
        const double se = std::sqrt(rec.risk_stderr[i] * rec.risk_stderr[i] +
                                    mbr_stderr * mbr_stderr);
        out.push_back({rec.times[i], rec.risk[i] - mbr, se});
    }
    return out;
}

struct SardBin {
    double g_lo = 0.0;
    double g_hi = 0.0;
    std::size_t count = 0;
    double near_critical_fraction = 0.0;
    double min_grad = 0.0;
};

/// Sphere-geometry probe: tangential gradients of g on S^{d+1} cap of the
/// cone, the a-direction identity grad^S_a g = (1/a - 2a) g, and the level-set
/// histogram of |grad^S g| that the regularity probe cares about.
struct SardReport {
    std::size_t grid_size = 0;
    std::vector<double> g_values;
    std::vector<double> tangential_norms;
    double identity_residual_max = 0.0;       // absolute
    double identity_residual_rel = 0.0;       // relative to sup_j |r_j|
    std::size_t identity_checked = 0;
    std::size_t skipped_small_a = 0;
    std::size_t skipped_kink = 0;
    double grad_median = 0.0;
    double near_critical_threshold = 0.0;     // 1e-3 * median, relative scale
    std::vector<SardBin> bins;

    void save_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot open for writing: " + path);
        out << "g_lo,g_hi,count,near_critical_fraction,min_grad\n";
        for (const auto& b : bins)
            out << fmt17(b.g_lo) << ',' << fmt17(b.g_hi) << ',' << b.count << ','
                << fmt17(b.near_critical_fraction) << ',' << fmt17(b.min_grad) << '\n';
    }
};

inline constexpr double kSardSmallA = 1e-6;
inline constexpr double kSardKinkTol = 1e-6;

inline SardReport sard_probe(const PotentialField& field, std::span<const double> grid,
                             int dim_theta, std::size_t bins_count) {
    const std::size_t stride = static_cast<std::size_t>(dim_theta);
    const std::size_t k = grid.size() / stride;
    if (k == 0) throw std::invalid_argument("sard_probe: empty grid");
    const std::size_t d = static_cast<std::size_t>(field.batch().dim);
    if (d + 2 != stride) throw std::invalid_argument("sard_probe: grid/batch dimension mismatch");

    SardReport rep;
    rep.grid_size = k;
    rep.g_values.resize(k);
    rep.tangential_norms.resize(k);

    // per-sample normalization for the kink distance
    const Batch& batch = field.batch();
    std::vector<double> xnorm(batch.size());
    for (std::size_t j = 0; j < batch.size(); ++j)
        xnorm[j] = std::sqrt(1.0 + norm2(batch.x(j)));

    const double supr = field.sup_residual();
    std::vector<double> v(stride);
    for (std::size_t i = 0; i < k; ++i) {
        auto theta = grid.subspan(i * stride, stride);
        if (std::abs(norm(theta) - 1.0) > 1e-6)
            throw std::invalid_argument("sard_probe: grid point is not unit length");
        const double g = field.potential(theta);
        field.potential_grad(theta, v);
        const double tv = dot(theta, v);
        double tn2 = 0.0;
        for (std::size_t c = 0; c < stride; ++c) {
            const double t = v[c] - tv * theta[c];
            tn2 += t * t;
        }
        rep.g_values[i] = g;
        rep.tangential_norms[i] = std::sqrt(tn2);

        const double a = theta[0];
        if (std::abs(a) < kSardSmallA) {
            ++rep.skipped_small_a;
            continue;
        }
        // kink exclusion: any sample with w.x+b too close to zero relative
        // to |(w,b)| sqrt(1+|x|^2) makes the gradient side untrustworthy
        const double wb = norm(theta.subspan(1, stride - 1));
        bool kink = wb == 0.0;
        for (std::size_t j = 0; j < batch.size() && !kink; ++j) {
            const double* x = &batch.xs[j * d];
            double z = theta[stride - 1];
            for (std::size_t c = 0; c < d; ++c) z += theta[c + 1] * x[c];
            if (std::abs(z) < kSardKinkTol * wb * xnorm[j]) kink = true;
        }
        if (kink) {
            ++rep.skipped_kink;
            continue;
        }
        const double lhs = v[0] - tv * a;           // tangential a-component
        const double rhs = (1.0 / a - 2.0 * a) * g;
        const double res = std::abs(lhs - rhs);
        rep.identity_residual_max = std::max(rep.identity_residual_max, res);
        ++rep.identity_checked;
    }
    rep.identity_residual_rel = supr > 0.0 ? rep.identity_residual_max / supr : 0.0;

    // level-set histogram of |grad^S g|
    std::vector<double> sorted = rep.tangential_norms;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k / 2), sorted.end());
    rep.grad_median = sorted[k / 2];
    rep.near_critical_threshold = 1e-3 * rep.grad_median;

    const auto [gmin_it, gmax_it] = std::minmax_element(rep.g_values.begin(), rep.g_values.end());
    const double glo = *gmin_it, ghi = *gmax_it;
    const std::size_t nb = std::max<std::size_t>(1, bins_count);
    const double width = (ghi - glo) / static_cast<double>(nb);
    rep.bins.assign(nb, SardBin{});
    for (std::size_t b = 0; b < nb; ++b) {
        rep.bins[b].g_lo = glo + width * static_cast<double>(b);
        rep.bins[b].g_hi = glo + width * static_cast<double>(b + 1);
        rep.bins[b].min_grad = std::numeric_limits<double>::infinity();
    }
    std::vector<std::size_t> crit(nb, 0);
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t b = width > 0.0
            ? std::min(nb - 1, static_cast<std::size_t>((rep.g_values[i] - glo) / width))
            : 0;
        ++rep.bins[b].count;
        rep.bins[b].min_grad = std::min(rep.bins[b].min_grad, rep.tangential_norms[i]);
        if (rep.tangential_norms[i] < rep.near_critical_threshold) ++crit[b];
    }
    for (std::size_t b = 0; b < nb; ++b) {
        if (rep.bins[b].count > 0)
            rep.bins[b].near_critical_fraction =
                static_cast<double>(crit[b]) / static_cast<double>(rep.bins[b].count);
        else
            rep.bins[b].min_grad = 0.0;
    }
    return rep;
}

}  // namespace mflab
