#pragma once

#include <vector>

#include "cfdiff/tensor.hpp"

namespace cfdiff {

// Diffusion noise schedule and the closed-form DDPM quantities derived from
// it. Arrays are stored in double and indexed by i = t - 1 for t in [1, T];
// alpha_bar_prev uses the convention alpha_bar_0 = 1, which forces the
// posterior variance at t = 1 to be exactly zero. Immutable after
// construction.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;            // beta_t
    std::vector<double> alpha;           // 1 - beta_t
    std::vector<double> alpha_bar;       // prod alpha_1..t
    std::vector<double> alpha_bar_prev;  // alpha_bar_{t-1}, alpha_bar_0 = 1
    std::vector<double> posterior_var;   // beta_tilde_t

    double beta_at(int t) const { return beta[t - 1]; }
    double alpha_at(int t) const { return alpha[t - 1]; }
    double alpha_bar_at(int t) const { return alpha_bar[t - 1]; }
    double alpha_bar_prev_at(int t) const { return alpha_bar_prev[t - 1]; }
    double posterior_var_at(int t) const { return posterior_var[t - 1]; }

    void check_t(int t) const;
};

// Linear beta schedule from beta_start to beta_end inclusive.
NoiseSchedule build_schedule(int T, double beta_start, double beta_end);

// q(x_t | x_0): sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
ImageGrid forward_noise(const NoiseSchedule& s, const ImageGrid& x0, int t, const ImageGrid& eps);

struct PosteriorParams {
    ImageGrid mean;
    double var = 0.0;
};

// Closed-form q(x_{t-1} | x_t, x_0) mean and variance.
PosteriorParams posterior_params(const NoiseSchedule& s, const ImageGrid& x0, const ImageGrid& xt, int t);

// x_0 estimate from a noise prediction: (x_t - sqrt(1-alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t).
// If clip is set the result is clamped elementwise to [-1, 1].
ImageGrid estimate_x0(const NoiseSchedule& s, const ImageGrid& xt, const ImageGrid& eps_hat, int t, bool clip);

}  // namespace cfdiff
