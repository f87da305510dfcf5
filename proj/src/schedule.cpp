#include "cfdiff/schedule.hpp"

#include <cmath>

namespace cfdiff {

void NoiseSchedule::check_t(int t) const {
    if (t < 1 || t > T) throw ContractError("timestep out of range [1, T]");
}

NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ContractError("schedule requires T >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ContractError("schedule requires 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    s.alpha_bar_prev.resize(T);
    s.posterior_var.resize(T);

    for (int i = 0; i < T; ++i) {
        double frac = (T == 1) ? 0.0 : static_cast<double>(i) / (T - 1);
        s.beta[i] = beta_start + (beta_end - beta_start) * frac;
    }
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        s.alpha[i] = 1.0 - s.beta[i];
        s.alpha_bar_prev[i] = prod;
        prod *= s.alpha[i];
        s.alpha_bar[i] = prod;
        s.posterior_var[i] = (1.0 - s.alpha_bar_prev[i]) / (1.0 - s.alpha_bar[i]) * s.beta[i];
    }
    return s;
}

ImageGrid forward_noise(const NoiseSchedule& s, const ImageGrid& x0, int t, const ImageGrid& eps) {
    s.check_t(t);
    require_same_shape(x0, eps, "forward_noise");
    float sa = static_cast<float>(std::sqrt(s.alpha_bar_at(t)));
    float sb = static_cast<float>(std::sqrt(1.0 - s.alpha_bar_at(t)));
    ImageGrid out(x0.shape);
    const float* px = x0.ptr();
    const float* pe = eps.ptr();
    float* po = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = sa * px[i] + sb * pe[i];
    return out;
}

PosteriorParams posterior_params(const NoiseSchedule& s, const ImageGrid& x0, const ImageGrid& xt, int t) {
    s.check_t(t);
    require_same_shape(x0, xt, "posterior_params");
    // Coefficients in double; at t = 1 they cast to exactly 1 and 0, so the
    // posterior mean reproduces x0 bitwise.
    double denom = 1.0 - s.alpha_bar_at(t);
    float c0 = static_cast<float>(std::sqrt(s.alpha_bar_prev_at(t)) * s.beta_at(t) / denom);
    float c1 = static_cast<float>(std::sqrt(s.alpha_at(t)) * (1.0 - s.alpha_bar_prev_at(t)) / denom);
    PosteriorParams p;
    p.var = s.posterior_var_at(t);
    p.mean = ImageGrid(x0.shape);
    const float* p0 = x0.ptr();
    const float* p1 = xt.ptr();
    float* pm = p.mean.ptr();
    for (int64_t i = 0; i < p.mean.numel(); ++i) pm[i] = c0 * p0[i] + c1 * p1[i];
    return p;
}

ImageGrid estimate_x0(const NoiseSchedule& s, const ImageGrid& xt, const ImageGrid& eps_hat, int t, bool clip) {
    s.check_t(t);
    require_same_shape(xt, eps_hat, "estimate_x0");
    float sb = static_cast<float>(std::sqrt(1.0 - s.alpha_bar_at(t)));
    float inv_sa = static_cast<float>(1.0 / std::sqrt(s.alpha_bar_at(t)));
    ImageGrid out(xt.shape);
    const float* px = xt.ptr();
    const float* pe = eps_hat.ptr();
    float* po = out.ptr();
    for (int64_t i = 0; i < out.numel(); ++i) {
        float v = (px[i] - sb * pe[i]) * inv_sa;
        if (clip) v = v < -1.0f ? -1.0f : (v > 1.0f ? 1.0f : v);
        po[i] = v;
    }
    return out;
}

}  // namespace cfdiff
