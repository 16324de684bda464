#pragma once

#include <cstdint>
#include <vector>

#include "fedtok/lm.hpp"
#include "fedtok/rng.hpp"

namespace fedtok {

// Central-DP knobs. noise_sigma is a noise MULTIPLIER: the Gaussian stddev
// applied to the summed update is noise_sigma * clip_bound, which keeps
// privacy budgets independent of the clip bound itself.
struct DpConfig {
    double clip_bound = 0.5;
    double noise_sigma = 0.0;
    double target_epsilon = 2.0;
    double target_delta = 1e-6;
    size_t population = 10000000;
    size_t cohort_size = 20000;
    size_t rounds = 5000;

    double sampling_rate() const;  // q = cohort_size / population
};

// Scales g by min(1, S / ||g||); the result's norm never exceeds S.
GradientVector clip(const GradientVector& g, double S);

// Adds i.i.d. N(0, (sigma * S)^2) noise per coordinate.
GradientVector add_noise(const GradientVector& sum, double sigma, double S,
                         Rng& rng);

// Renyi-DP order grid used by the accountant: 1.25, 1.50, ..., 64.00.
std::vector<double> rdp_order_grid();

// RDP of one Poisson-subsampled Gaussian release at the given order.
double rdp_subsampled_gaussian(double q, double sigma, double alpha);

// (epsilon, delta) after T releases at sampling rate q and multiplier sigma:
// min over the order grid of T * rdp(alpha) + log(1/delta) / (alpha - 1).
double accountant_epsilon(double sigma, double q, size_t rounds, double delta);

// Same computation with the per-order RDP values evaluated once, so a
// training loop can ask for the cumulative budget after every round cheaply.
class PrivacyAccountant {
public:
    PrivacyAccountant(double sigma, double q, double delta);
    double epsilon(size_t rounds) const;

private:
    std::vector<double> orders_;
    std::vector<double> rdp_;
    double log_inv_delta_;
};

// Smallest sigma in (0, 100] (bisection, tolerance 1e-3) whose accounted
// epsilon stays within the target.
double calibrate_sigma(double epsilon, double delta, double q, size_t rounds);

}  // namespace fedtok
