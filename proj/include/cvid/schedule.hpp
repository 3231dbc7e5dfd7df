#pragma once

#include <vector>

#include "cvid/tensor.hpp"

namespace cvid {

// Cumulative noise schedule. alpha_bar[t] = prod_{i=1..t} (1 - beta_i) with
// beta linearly interpolated across steps; alpha_bar[0] = 1 so the final
// denoise step lands on a clean latent.
struct NoiseSchedule {
    int total_steps = 0;
    std::vector<double> alpha_bar;  // size total_steps + 1

    static NoiseSchedule make(int T, double beta_start, double beta_end);
};

// Defaults beta_start=1e-4, beta_end=0.02 are the T=1000 convention; scale by
// 1000/T so total noise injected stays comparable at short schedules.
NoiseSchedule make_default_schedule(int T = 50);

struct VideoLatent {
    Tensor data;
    int t = 0;

    VideoLatent() : data({0}) {}
    explicit VideoLatent(Tensor d, int timestep = 0) : data(std::move(d)), t(timestep) {}

    int64_t frames() const { return data.dim(0); }
    int64_t channels() const { return data.dim(1); }
    int64_t height() const { return data.dim(2); }
    int64_t width() const { return data.dim(3); }
};

// sqrt(ab[t]) z0 + sqrt(1-ab[t]) eps, tagged t
VideoLatent q_sample(const VideoLatent& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

// Deterministic DDIM step t -> t-1:
//   z_{t-1} = sqrt(ab[t-1]) (z_t - sqrt(1-ab[t]) eps)/sqrt(ab[t]) + sqrt(1-ab[t-1]) eps
VideoLatent ddim_denoise_step(const VideoLatent& z_t, const Tensor& eps_pred, int t,
                              const NoiseSchedule& sched);

// Algebraic inverse of the denoise step, t-1 -> t
VideoLatent ddim_invert_step(const VideoLatent& z_prev, const Tensor& eps_pred, int t,
                             const NoiseSchedule& sched);

// eps_uncond + w (eps_cond - eps_uncond)
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w);

}  // namespace cvid
