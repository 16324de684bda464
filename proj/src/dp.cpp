#include "fedtok/dp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fedtok {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
    if (a == -kInf) return b;
    if (b == -kInf) return a;
    const double hi = std::max(a, b), lo = std::min(a, b);
    return hi + std::log1p(std::exp(lo - hi));
}

double log_sub(double a, double b) {
    if (b == -kInf) return a;
    if (b > a) return std::numeric_limits<double>::quiet_NaN();
    if (a == b) return -kInf;
    return a + std::log1p(-std::exp(b - a));
}

// log(erfc(x)) without underflow for large x.
double log_erfc(double x) {
    const double r = std::erfc(x);
    if (r > 0.0) return std::log(r);
    // Laurent tail of erfc at +infinity.
    const double x2 = x * x;
    return -std::log(M_PI) / 2 - std::log(x) - x2 - 0.5 / x2 +
           0.625 / (x2 * x2) - (37.0 / 24.0) / (x2 * x2 * x2) +
           (353.0 / 64.0) / (x2 * x2 * x2 * x2);
}

// log sum over i = 0..alpha of C(alpha,i) q^i (1-q)^(alpha-i) e^{(i^2-i)/2s^2}
double log_a_integer(double q, double sigma, int64_t alpha) {
    double log_a = -kInf;
    const double log_q = std::log(q), log_1mq = std::log1p(-q);
    for (int64_t i = 0; i <= alpha; ++i) {
        const double log_coef = std::lgamma(alpha + 1) - std::lgamma(i + 1) -
                                std::lgamma(alpha - i + 1);
        const double term = log_coef + i * log_q + (alpha - i) * log_1mq +
                            (static_cast<double>(i) * i - i) / (2 * sigma * sigma);
        log_a = log_add(log_a, term);
    }
    return log_a;
}

// Fractional-order variant: two-sided series with the split point z0, signs
// tracked because the generalized binomial coefficients alternate. The tail
// decays like a power law in i when q is near 1/2, so the iteration budget is
// generous; a series that still will not settle (or diverges outright, which
// happens for q > 1/2) yields +inf and the caller skips that order — the
// remaining orders still give valid privacy bounds.
double log_a_fractional(double q, double sigma, double alpha) {
    double log_a0 = -kInf, log_a1 = -kInf;
    const double z0 = sigma * sigma * std::log(1 / q - 1) + 0.5;
    const double log_q = std::log(q), log_1mq = std::log1p(-q);

    double log_coef = 0.0;  // |binom(alpha, i)|, i = 0
    int sign = 1;
    for (int64_t i = 0; i < 2000000; ++i) {
        if (i > 0) {
            const double factor = (alpha - i + 1) / i;
            if (factor == 0.0) break;  // exact integer alpha, series ended
            log_coef += std::log(std::abs(factor));
            if (factor < 0) sign = -sign;
        }
        const double j = alpha - i;
        const double log_t0 = log_coef + i * log_q + j * log_1mq;
        const double log_t1 = log_coef + j * log_q + i * log_1mq;
        const double log_e0 =
            std::log(0.5) + log_erfc((i - z0) / (std::sqrt(2.0) * sigma));
        const double log_e1 =
            std::log(0.5) + log_erfc((z0 - j) / (std::sqrt(2.0) * sigma));
        const double log_s0 =
            log_t0 + (static_cast<double>(i) * i - i) / (2 * sigma * sigma) + log_e0;
        const double log_s1 = log_t1 + (j * j - j) / (2 * sigma * sigma) + log_e1;
        if (std::max(log_s0, log_s1) > 700.0) return kInf;  // diverging

        if (sign > 0) {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if (std::isnan(log_a0) || std::isnan(log_a1)) return kInf;
        // Term magnitudes first grow toward a hump near i ~ alpha*q before the
        // tail decays, and for large alpha the leading terms start below any
        // fixed threshold; only treat small terms as convergence once the hump
        // is behind us.
        if (std::max(log_s0, log_s1) < -30.0 && static_cast<double>(i) > alpha) {
            const double log_a = log_add(log_a0, log_a1);
            // A Renyi divergence is nonnegative, so log A >= 0; a negative
            // value means cancellation destroyed the signal at this order.
            return log_a < 0.0 ? kInf : log_a;
        }
    }
    return kInf;
}

}  // namespace

double DpConfig::sampling_rate() const {
    if (population == 0) throw std::invalid_argument("DpConfig: empty population");
    return std::min(1.0, static_cast<double>(cohort_size) /
                             static_cast<double>(population));
}

GradientVector clip(const GradientVector& g, double S) {
    if (S <= 0.0) throw std::invalid_argument("clip: bound must be positive");
    for (double v : g.values) {
        if (!std::isfinite(v)) {
            throw std::invalid_argument("clip: gradient has non-finite entries");
        }
    }
    GradientVector out = g;
    out.recompute_norm();
    if (out.norm <= S || out.norm == 0.0) return out;
    double scale = S / out.norm;
    for (double& v : out.values) v *= scale;
    out.recompute_norm();
    // Rounding can leave the norm a hair above S; shave until it is not.
    while (out.norm > S) {
        for (double& v : out.values) v *= (1.0 - 1e-15);
        out.recompute_norm();
    }
    return out;
}

GradientVector add_noise(const GradientVector& sum, double sigma, double S,
                         Rng& rng) {
    if (sigma < 0.0) throw std::invalid_argument("add_noise: sigma must be >= 0");
    GradientVector out = sum;
    if (sigma > 0.0) {
        const double stddev = sigma * S;
        for (double& v : out.values) v += rng.normal(0.0, stddev);
    }
    out.recompute_norm();
    return out;
}

std::vector<double> rdp_order_grid() {
    std::vector<double> orders;
    for (int i = 5; i <= 256; ++i) {  // 1.25 .. 64.00 in steps of 0.25
        orders.push_back(i * 0.25);
    }
    return orders;
}

double rdp_subsampled_gaussian(double q, double sigma, double alpha) {
    if (sigma <= 0.0) throw std::invalid_argument("rdp: sigma must be positive");
    if (q <= 0.0 || q > 1.0) throw std::invalid_argument("rdp: q must be in (0,1]");
    if (alpha <= 1.0) throw std::invalid_argument("rdp: order must exceed 1");
    if (q == 1.0) return alpha / (2 * sigma * sigma);  // plain Gaussian mechanism

    const double int_part = std::floor(alpha);
    const double log_a =
        int_part == alpha
            ? log_a_integer(q, sigma, static_cast<int64_t>(int_part))
            : log_a_fractional(q, sigma, alpha);
    return log_a / (alpha - 1.0);
}

PrivacyAccountant::PrivacyAccountant(double sigma, double q, double delta)
    : orders_(rdp_order_grid()) {
    if (delta <= 0.0 || delta >= 1.0) {
        throw std::invalid_argument("accountant: delta must be in (0,1)");
    }
    log_inv_delta_ = std::log(1.0 / delta);
    rdp_.reserve(orders_.size());
    for (double alpha : orders_) {
        rdp_.push_back(rdp_subsampled_gaussian(q, sigma, alpha));
    }
}

double PrivacyAccountant::epsilon(size_t rounds) const {
    if (rounds == 0) throw std::invalid_argument("accountant: rounds must be >= 1");
    double best = kInf;
    for (size_t i = 0; i < orders_.size(); ++i) {
        if (!std::isfinite(rdp_[i])) continue;
        best = std::min(best, rounds * rdp_[i] + log_inv_delta_ / (orders_[i] - 1.0));
    }
    if (!std::isfinite(best)) {
        throw std::runtime_error("accountant: no finite epsilon at any order");
    }
    return best;
}

double accountant_epsilon(double sigma, double q, size_t rounds, double delta) {
    return PrivacyAccountant(sigma, q, delta).epsilon(rounds);
}

double calibrate_sigma(double epsilon, double delta, double q, size_t rounds) {
    if (epsilon <= 0.0) {
        throw std::invalid_argument("calibrate_sigma: epsilon must be positive");
    }
    double lo = 1e-4, hi = 100.0;
    if (accountant_epsilon(hi, q, rounds, delta) > epsilon) {
        throw std::runtime_error(
            "calibrate_sigma: budget unreachable with sigma <= 100");
    }
    if (accountant_epsilon(lo, q, rounds, delta) <= epsilon) return lo;
    while (hi - lo > 1e-3) {
        const double mid = 0.5 * (lo + hi);
        if (accountant_epsilon(mid, q, rounds, delta) <= epsilon) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    return hi;
}

}  // namespace fedtok
