#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "tdpo/denoiser.hpp"
#include "tdpo/optim.hpp"
#include "tdpo/schedule.hpp"

namespace tdpo::ddpm {

/// One denoising rollout x_T .. x_0 with everything needed to replay its
/// transition densities. Arrays are indexed by the physical timestep:
/// x[t] is the state at noise level t; mean[t], sigma[t] and log_prob[t]
/// describe the transition x_t -> x_{t-1} (index 0 unused). The MDP time of
/// state x_t is T - t; the reward fields are filled by the training loop.
struct Trajectory {
    ad::Tensor context;            // (2,)
    std::vector<ad::Tensor> x;     // T+1 states, each (2,)
    std::vector<ad::Tensor> mean;  // per-transition posterior means
    std::vector<double> sigma;     // per-transition sampler std
    std::vector<double> log_prob;  // per-transition log densities
    double final_reward = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> temporal;  // per-transition temporal rewards
    std::uint64_t seed = 0;

    std::size_t steps() const { return x.empty() ? 0 : x.size() - 1; }
};

/// Closed-form forward noising x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps.
ad::Tensor forward_noise(const ad::Tensor& x0, std::size_t t, const ad::Tensor& eps,
                         const NoiseSchedule& sched);

/// DDPM posterior mean reconstructed from the guided noise estimate. The
/// single arithmetic path shared by sampling and density evaluation, so
/// recorded transitions replay bit-identically.
ad::Var posterior_mean(const Denoiser& den, const NoiseSchedule& sched, const ad::Var& x_t,
                       std::size_t t, const ad::Var& ctx, double guidance_scale);

/// Deterministic core of the noise-prediction objective: mean over the
/// batch of the per-item squared error between given and predicted noise.
ad::Var pretrain_loss_given(const Denoiser& den, const ad::Tensor& x_t,
                            const std::vector<int>& ts, const ad::Tensor& ctx,
                            const ad::Tensor& eps);

/// Noise-prediction objective: mean over the batch of the per-item squared
/// error between drawn and predicted noise. Draw order per item: timestep,
/// two noise normals, one dropout uniform.
ad::Var pretrain_loss(const Denoiser& den, const ad::Tensor& x0, const ad::Tensor& ctx,
                      const NoiseSchedule& sched, double context_dropout, Rng& rng);

/// One optimizer step on the pretraining objective; returns the loss value.
double pretrain_step(Denoiser& den, ad::AdamW& opt, const ad::Tensor& x0,
                     const ad::Tensor& ctx, const NoiseSchedule& sched,
                     double context_dropout, Rng& rng);

struct DenoiseStep {
    ad::Tensor x_prev;
    ad::Tensor mean;
    double log_prob = 0.0;
};

/// One ancestral sampling transition x_t -> x_{t-1}.
DenoiseStep denoise_step(const Denoiser& den, const NoiseSchedule& sched,
                         const ad::Tensor& x_t, std::size_t t, const ad::Tensor& c,
                         double guidance_scale, Rng& rng);

/// Canonical per-trajectory seed for element `index` of a batch rooted at
/// `base`; a row of a batched sample equals the single rollout at its seed.
std::uint64_t derive_trajectory_seed(std::uint64_t base, std::size_t index);

Trajectory sample_trajectory(const Denoiser& den, const NoiseSchedule& sched,
                             const ad::Tensor& c, double guidance_scale,
                             std::uint64_t seed);

/// Batched rollouts, optionally split across worker threads. Each
/// trajectory consumes only its own seed stream, so the result is
/// independent of batch composition and worker count; results are returned
/// in index order.
std::vector<Trajectory> sample_trajectories(const Denoiser& den, const NoiseSchedule& sched,
                                            const ad::Tensor& contexts,
                                            double guidance_scale,
                                            const std::vector<std::uint64_t>& seeds,
                                            std::size_t workers = 1);

/// Differentiable per-row log density of x_prev under the current
/// parameters' transition at timestep t.
ad::Var transition_log_prob_rows(const Denoiser& den, const NoiseSchedule& sched,
                                 const ad::Tensor& x_prev, const ad::Tensor& x_t,
                                 std::size_t t, const ad::Tensor& ctx,
                                 double guidance_scale);

ad::Var transition_log_prob(const Denoiser& den, const NoiseSchedule& sched,
                            const ad::Tensor& x_prev, const ad::Tensor& x_t, std::size_t t,
                            const ad::Tensor& c, double guidance_scale);

}  // namespace tdpo::ddpm
