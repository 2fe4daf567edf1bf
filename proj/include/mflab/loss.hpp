#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mflab/common.hpp"
#include "mflab/data.hpp"

namespace mflab {

/// Loss selection. `clip` turns ell into its affine extension beyond |y| <= S,
/// which is what eval()/d1() then compute.
struct LossModel {
    enum class Kind { huber, pseudo_huber, softplus, power };
    Kind kind = Kind::softplus;
    double p = 2.0;                 // power exponent, p in (1, inf)
    std::optional<double> clip;     // S > 0

    bool lipschitz() const { return kind != Kind::power || clip.has_value(); }
};

namespace detail {

inline double raw_eval(const LossModel& lm, double y, double yp) {
    switch (lm.kind) {
        case LossModel::Kind::huber: {
            const double r = std::abs(y - yp);
            return r < 1.0 ? 0.5 * r * r : r - 0.5;
        }
        case LossModel::Kind::pseudo_huber: {
            const double r = y - yp;
            return std::sqrt(r * r + 1.0) - 1.0;
        }
        case LossModel::Kind::softplus: {
            const double z = -y * yp;
            // log(1 + e^z) without overflow
            return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        }
        case LossModel::Kind::power: {
            const double r = std::abs(y - yp);
            return std::pow(r, lm.p) / lm.p;
        }
    }
    return 0.0;
}

inline double raw_d1(const LossModel& lm, double y, double yp) {
    switch (lm.kind) {
        case LossModel::Kind::huber: {
            const double r = y - yp;
            if (std::abs(r) < 1.0) return r;
            return r > 0.0 ? 1.0 : -1.0;
        }
        case LossModel::Kind::pseudo_huber: {
            const double r = y - yp;
            return r / std::sqrt(r * r + 1.0);
        }
        case LossModel::Kind::softplus:
            // d/dy log(1+e^{-y y'}) = -y' / (1 + e^{y y'})
            return -yp / (1.0 + std::exp(y * yp));
        case LossModel::Kind::power: {
            const double r = y - yp;
            if (r == 0.0) return 0.0;
            const double m = std::pow(std::abs(r), lm.p - 1.0);
            return r > 0.0 ? m : -m;
        }
    }
    return 0.0;
}

}  // namespace detail

/// ell_S: equal to ell on |y| <= S, affine with slope d1(+-S, y') beyond.
inline double clip_eval(const LossModel& lm, double y, double yp) {
    if (!lm.clip) throw std::invalid_argument("clip_eval: loss has no clip bound");
    const double s = *lm.clip;
    if (y > s) return detail::raw_eval(lm, s, yp) + detail::raw_d1(lm, s, yp) * (y - s);
    if (y < -s) return detail::raw_eval(lm, -s, yp) + detail::raw_d1(lm, -s, yp) * (y + s);
    return detail::raw_eval(lm, y, yp);
}

inline double clip_d1(const LossModel& lm, double y, double yp) {
    if (!lm.clip) throw std::invalid_argument("clip_d1: loss has no clip bound");
    const double s = *lm.clip;
    return detail::raw_d1(lm, std::clamp(y, -s, s), yp);
}

inline double eval(const LossModel& lm, double y, double yp) {
    return lm.clip ? clip_eval(lm, y, yp) : detail::raw_eval(lm, y, yp);
}

inline double d1(const LossModel& lm, double y, double yp) {
    return lm.clip ? clip_d1(lm, y, yp) : detail::raw_d1(lm, y, yp);
}

/// Discrete conditional label law: atoms ys with weights ws (sum 1).
struct CondLaw {
    std::vector<double> ys;
    std::vector<double> ws;
};

/// Augmented loss L_x(alpha) = sum_k w_k ell(alpha, y_k).
inline double augmented_loss(const LossModel& lm, const CondLaw& law, double alpha) {
    double s = 0.0;
    for (std::size_t k = 0; k < law.ys.size(); ++k) s += law.ws[k] * eval(lm, alpha, law.ys[k]);
    return s;
}

/// Golden-section minimizer of L_x on [lo, hi]; returns the abscissa.
inline double minimize_augmented(const LossModel& lm, const CondLaw& law,
                                 double lo = -50.0, double hi = 50.0, double tol = 1e-8) {
    const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = lo, b = hi;
    double c = b - gr * (b - a);
    double d = a + gr * (b - a);
    double fc = augmented_loss(lm, law, c);
    double fd = augmented_loss(lm, law, d);
    while (b - a > tol) {
        if (fc < fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - gr * (b - a);
            fc = augmented_loss(lm, law, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + gr * (b - a);
            fd = augmented_loss(lm, law, d);
        }
    }
    return 0.5 * (a + b);
}

/// Pointwise minimizer of the augmented loss, where one is available.
/// softplus/binary has the closed form log(lambda/(1-lambda)); symmetric
/// regression noise centers the minimizer at the target; remaining binary
/// combinations fall back to a cached golden-section search.
struct BayesOptimal {
    std::function<double(std::span<const double>)> f;
    bool closed_form = false;
};

inline std::optional<BayesOptimal> bayes_optimal(const LossModel& lm, const LabelModel& label) {
    if (label.kind == LabelModel::Kind::binary) {
        auto lambda = label.lambda;
        if (!lambda) return std::nullopt;
        if (lm.kind == LossModel::Kind::softplus && !lm.clip) {
            BayesOptimal r;
            r.closed_form = true;
            r.f = [lambda](std::span<const double> x) {
                const double l = lambda(x);
                return std::log(l / (1.0 - l));  // +-inf when l hits {0,1}
            };
            return r;
        }
        // numeric fallback, cached per distinct lambda value
        auto cache = std::make_shared<std::map<double, double>>();
        BayesOptimal r;
        r.closed_form = false;
        r.f = [lm, lambda, cache](std::span<const double> x) {
            const double l = lambda(x);
            auto it = cache->find(l);
            if (it != cache->end()) return it->second;
            CondLaw law{{1.0, -1.0}, {l, 1.0 - l}};
            const double v = minimize_augmented(lm, law);
            (*cache)[l] = v;
            return v;
        };
        return r;
    }
    // regression: symmetric noise about the target, so the target minimizes
    // L_x for every symmetric convex loss here.
    if (!label.target) return std::nullopt;
    if (lm.kind == LossModel::Kind::softplus) return std::nullopt;  // +-1 labels only
    BayesOptimal r;
    r.closed_form = true;
    r.f = label.target;
    return r;
}

struct MbrEstimate {
    double value = 0.0;
    double stderr_ = 0.0;
    std::size_t n = 0;
};

/// Monte-Carlo estimate of R~(f*) = int ell(f*(x), y) dP.
inline MbrEstimate mbr_estimate(const LossModel& lm, const DataModel& model, std::size_t n) {
    auto opt = bayes_optimal(lm, model.label);
    if (!opt) throw std::runtime_error("mbr_estimate: no Bayes-optimal oracle for this loss/label pair");
    const Batch batch = sample(model, n, kStreamMbr);
    std::vector<double> vals(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double fstar = opt->f(batch.x(j));
        if (!std::isfinite(fstar)) throw std::runtime_error("mbr_estimate: MBR not attained by finite f*");
        vals[j] = eval(lm, fstar, batch.ys[j]);
    }
    auto ms = mean_stderr(vals);
    return {ms.value, ms.stderr_, n};
}

}  // namespace mflab
