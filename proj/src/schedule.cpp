#include "cvid/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace cvid {

namespace {
void check_t(int t, const NoiseSchedule& sched, const char* who) {
    if (t < 1 || t > sched.total_steps)
        throw std::domain_error(std::string(who) + ": timestep " + std::to_string(t) +
                                " outside [1, " + std::to_string(sched.total_steps) + "]");
}
}  // namespace

NoiseSchedule NoiseSchedule::make(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::domain_error("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start < 1.0) || !(beta_end > 0.0 && beta_end < 1.0))
        throw std::domain_error("make_schedule: betas must lie in (0,1)");
    if (beta_start > beta_end)
        throw std::domain_error("make_schedule: beta_start must not exceed beta_end");

    NoiseSchedule s;
    s.total_steps = T;
    s.alpha_bar.resize(T + 1);
    s.alpha_bar[0] = 1.0;
    double prod = 1.0;
    for (int i = 1; i <= T; ++i) {
        double frac = T > 1 ? double(i - 1) / double(T - 1) : 0.0;
        double beta = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - beta;
        s.alpha_bar[i] = prod;
    }
    return s;
}

NoiseSchedule make_default_schedule(int T) {
    double scale = 1000.0 / double(T);
    return NoiseSchedule::make(T, 1e-4 * scale, 0.02 * scale);
}

VideoLatent q_sample(const VideoLatent& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    check_t(t, sched, "q_sample");
    require_same_shape(z0.data, eps, "q_sample");
    double ab = sched.alpha_bar[t];
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out(z0.data.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = a * z0.data.data[i] + b * eps.data[i];
    return VideoLatent(std::move(out), t);
}

VideoLatent ddim_denoise_step(const VideoLatent& z_t, const Tensor& eps_pred, int t,
                              const NoiseSchedule& sched) {
    check_t(t, sched, "ddim_denoise_step");
    require_same_shape(z_t.data, eps_pred, "ddim_denoise_step");
    double ab_t = sched.alpha_bar[t];
    double ab_prev = sched.alpha_bar[t - 1];
    double to_z0 = std::sqrt(ab_prev / ab_t);
    double noise_out = std::sqrt(1.0 - ab_t);
    double noise_in = std::sqrt(1.0 - ab_prev);
    Tensor out(z_t.data.shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.data[i] = to_z0 * (z_t.data.data[i] - noise_out * eps_pred.data[i]) +
                      noise_in * eps_pred.data[i];
    return VideoLatent(std::move(out), t - 1);
}

VideoLatent ddim_invert_step(const VideoLatent& z_prev, const Tensor& eps_pred, int t,
                             const NoiseSchedule& sched) {
    check_t(t, sched, "ddim_invert_step");
    require_same_shape(z_prev.data, eps_pred, "ddim_invert_step");
    double ab_t = sched.alpha_bar[t];
    double ab_prev = sched.alpha_bar[t - 1];
    double to_z0 = std::sqrt(ab_t / ab_prev);
    double noise_out = std::sqrt(1.0 - ab_prev);
    double noise_in = std::sqrt(1.0 - ab_t);
    Tensor out(z_prev.data.shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.data[i] = to_z0 * (z_prev.data.data[i] - noise_out * eps_pred.data[i]) +
                      noise_in * eps_pred.data[i];
    return VideoLatent(std::move(out), t);
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w) {
    require_same_shape(eps_uncond, eps_cond, "cfg_combine");
    Tensor out(eps_uncond.shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.data[i] = eps_uncond.data[i] + w * (eps_cond.data[i] - eps_uncond.data[i]);
    return out;
}

}  // namespace cvid
