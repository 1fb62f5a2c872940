#include "tdpo/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <thread>

namespace tdpo::ddpm {

using ad::Tensor;
using ad::Var;

namespace {

void check_t(const NoiseSchedule& sched, std::size_t t, const char* op) {
    if (t < 1 || t > sched.T)
        throw std::invalid_argument(std::string(op) + ": timestep " + std::to_string(t) +
                                    " out of range [1, " + std::to_string(sched.T) + "]");
}

Tensor row_of(const Tensor& mat, std::size_t i) {
    Tensor out = Tensor::zeros({mat.cols()});
    for (std::size_t j = 0; j < mat.cols(); ++j) out[j] = mat.at(i, j);
    return out;
}

}  // namespace

Tensor forward_noise(const Tensor& x0, std::size_t t, const Tensor& eps,
                     const NoiseSchedule& sched) {
    check_t(sched, t, "forward_noise");
    if (!x0.same_shape(eps))
        throw std::invalid_argument("forward_noise: x0 and eps shape mismatch");
    double a = std::sqrt(sched.alpha_bar[t]);
    double b = std::sqrt(1.0 - sched.alpha_bar[t]);
    Tensor out = x0;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

Var posterior_mean(const Denoiser& den, const NoiseSchedule& sched, const Var& x_t,
                   std::size_t t, const Var& ctx, double guidance_scale) {
    check_t(sched, t, "posterior_mean");
    std::vector<int> ts(x_t.value().rows(), static_cast<int>(t));
    Var eps_hat = den.guided_noise(x_t, ts, ctx, guidance_scale);
    double coef = sched.beta[t] / std::sqrt(1.0 - sched.alpha_bar[t]);
    double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[t]);
    return ad::scale(ad::sub(x_t, ad::scale(eps_hat, coef)), inv_sqrt_alpha);
}

Var pretrain_loss_given(const Denoiser& den, const Tensor& x_t, const std::vector<int>& ts,
                        const Tensor& ctx, const Tensor& eps) {
    if (x_t.rows() == 0) throw std::invalid_argument("pretrain_loss: empty batch");
    Var pred = den.predict_noise(Var::constant(x_t), ts, Var::constant(ctx));
    Var per_item = ad::sum_rows(ad::square(ad::sub(pred, Var::constant(eps))));
    return ad::mean(per_item);
}

Var pretrain_loss(const Denoiser& den, const Tensor& x0, const Tensor& ctx,
                  const NoiseSchedule& sched, double context_dropout, Rng& rng) {
    std::size_t B = x0.rows();
    if (B == 0) throw std::invalid_argument("pretrain_loss: empty batch");
    if (ctx.rows() != B) throw std::invalid_argument("pretrain_loss: context batch mismatch");
    std::size_t d = x0.cols();
    Tensor x_t = Tensor::zeros({B, d});
    Tensor eps = Tensor::zeros({B, d});
    Tensor ctx_used = ctx;
    std::vector<int> ts(B);
    for (std::size_t i = 0; i < B; ++i) {
        std::size_t t = static_cast<std::size_t>(
            rng.uniform_int(1, static_cast<std::int64_t>(sched.T)));
        ts[i] = static_cast<int>(t);
        double a = std::sqrt(sched.alpha_bar[t]);
        double b = std::sqrt(1.0 - sched.alpha_bar[t]);
        for (std::size_t j = 0; j < d; ++j) {
            eps.at(i, j) = rng.normal();
            x_t.at(i, j) = a * x0.at(i, j) + b * eps.at(i, j);
        }
        if (rng.bernoulli(context_dropout))
            for (std::size_t j = 0; j < ctx_used.cols(); ++j) ctx_used.at(i, j) = 0.0;
    }
    return pretrain_loss_given(den, x_t, ts, ctx_used, eps);
}

double pretrain_step(Denoiser& den, ad::AdamW& opt, const Tensor& x0, const Tensor& ctx,
                     const NoiseSchedule& sched, double context_dropout, Rng& rng) {
    opt.zero_grad();
    Var loss = pretrain_loss(den, x0, ctx, sched, context_dropout, rng);
    ad::backward(loss);
    opt.step();
    return loss.value()[0];
}

namespace {

// shared core of single-step and batched sampling: advances x (B,d) in
// place, returning means and per-row log densities
void denoise_rows(const Denoiser& den, const NoiseSchedule& sched, Tensor& x, std::size_t t,
                  const Tensor& ctx, double guidance_scale, std::vector<Rng*>& rngs,
                  Tensor& mean_out, std::vector<double>& logp_out) {
    ad::NoGradGuard ng;
    std::size_t B = x.rows(), d = x.cols();
    Var mean = posterior_mean(den, sched, Var::constant(x), t, Var::constant(ctx),
                              guidance_scale);
    double sigma = sched.sigma[t];
    Tensor x_prev = Tensor::zeros({B, d});
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < d; ++j)
            x_prev.at(i, j) = mean.value().at(i, j) + sigma * rngs[i]->normal();
    Var logp = ad::gaussian_log_density_rows(Var::constant(x_prev), mean, sigma);
    mean_out = mean.value();
    logp_out.assign(logp.value().data.begin(), logp.value().data.end());
    x = std::move(x_prev);
}

}  // namespace

DenoiseStep denoise_step(const Denoiser& den, const NoiseSchedule& sched, const Tensor& x_t,
                         std::size_t t, const Tensor& c, double guidance_scale, Rng& rng) {
    check_t(sched, t, "denoise_step");
    Tensor x = Tensor::zeros({1, x_t.size()});
    for (std::size_t j = 0; j < x_t.size(); ++j) x.at(0, j) = x_t[j];
    Tensor ctx = Tensor::zeros({1, c.size()});
    for (std::size_t j = 0; j < c.size(); ++j) ctx.at(0, j) = c[j];
    std::vector<Rng*> rngs{&rng};
    Tensor mean;
    std::vector<double> logp;
    denoise_rows(den, sched, x, t, ctx, guidance_scale, rngs, mean, logp);
    DenoiseStep out;
    out.x_prev = row_of(x, 0);
    out.mean = row_of(mean, 0);
    out.log_prob = logp[0];
    return out;
}

std::uint64_t derive_trajectory_seed(std::uint64_t base, std::size_t index) {
    return mix_seed(mix_seed(base) + static_cast<std::uint64_t>(index) + 1);
}

namespace {

void sample_slice(const Denoiser& den, const NoiseSchedule& sched, const Tensor& contexts,
                  double guidance_scale, const std::vector<std::uint64_t>& seeds,
                  std::size_t lo, std::size_t hi, std::vector<Trajectory>& out) {
    std::size_t B = hi - lo;
    if (B == 0) return;
    std::size_t T = sched.T;
    std::size_t d = den.config().data_dim;
    std::vector<Rng> rngs;
    rngs.reserve(B);
    std::vector<Rng*> rng_ptrs(B);
    for (std::size_t i = 0; i < B; ++i) rngs.push_back(Rng::stream(seeds[lo + i], 0));
    for (std::size_t i = 0; i < B; ++i) rng_ptrs[i] = &rngs[i];

    Tensor ctx = Tensor::zeros({B, 2});
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < 2; ++j) ctx.at(i, j) = contexts.at(lo + i, j);

    Tensor x = Tensor::zeros({B, d});
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < d; ++j) x.at(i, j) = rngs[i].normal();

    for (std::size_t i = 0; i < B; ++i) {
        Trajectory& tr = out[lo + i];
        tr.context = row_of(ctx, i);
        tr.x.assign(T + 1, Tensor());
        tr.mean.assign(T + 1, Tensor());
        tr.sigma.assign(T + 1, 0.0);
        tr.log_prob.assign(T + 1, 0.0);
        tr.temporal.assign(T + 1, 0.0);
        tr.seed = seeds[lo + i];
        tr.x[T] = row_of(x, i);
    }

    Tensor mean;
    std::vector<double> logp;
    for (std::size_t t = T; t >= 1; --t) {
        denoise_rows(den, sched, x, t, ctx, guidance_scale, rng_ptrs, mean, logp);
        for (std::size_t i = 0; i < B; ++i) {
            Trajectory& tr = out[lo + i];
            tr.x[t - 1] = row_of(x, i);
            tr.mean[t] = row_of(mean, i);
            tr.sigma[t] = sched.sigma[t];
            tr.log_prob[t] = logp[i];
        }
    }
}

}  // namespace

Trajectory sample_trajectory(const Denoiser& den, const NoiseSchedule& sched, const Tensor& c,
                             double guidance_scale, std::uint64_t seed) {
    Tensor ctx = Tensor::zeros({1, 2});
    ctx.at(0, 0) = c[0];
    ctx.at(0, 1) = c[1];
    std::vector<Trajectory> out(1);
    sample_slice(den, sched, ctx, guidance_scale, {seed}, 0, 1, out);
    return std::move(out[0]);
}

std::vector<Trajectory> sample_trajectories(const Denoiser& den, const NoiseSchedule& sched,
                                            const Tensor& contexts, double guidance_scale,
                                            const std::vector<std::uint64_t>& seeds,
                                            std::size_t workers) {
    std::size_t n = contexts.rows();
    if (seeds.size() != n)
        throw std::invalid_argument("sample_trajectories: one seed per trajectory required");
    std::vector<Trajectory> out(n);
    if (workers <= 1 || n < 2) {
        sample_slice(den, sched, contexts, guidance_scale, seeds, 0, n, out);
        return out;
    }
    workers = std::min(workers, n);
    std::vector<std::thread> pool;
    std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&, lo, hi] {
            sample_slice(den, sched, contexts, guidance_scale, seeds, lo, hi, out);
        });
    }
    for (auto& th : pool) th.join();
    return out;
}

Var transition_log_prob_rows(const Denoiser& den, const NoiseSchedule& sched,
                             const Tensor& x_prev, const Tensor& x_t, std::size_t t,
                             const Tensor& ctx, double guidance_scale) {
    check_t(sched, t, "transition_log_prob");
    if (!x_prev.same_shape(x_t))
        throw std::invalid_argument("transition_log_prob: state shape mismatch");
    Var mean = posterior_mean(den, sched, Var::constant(x_t), t, Var::constant(ctx),
                              guidance_scale);
    return ad::gaussian_log_density_rows(Var::constant(x_prev), mean, sched.sigma[t]);
}

Var transition_log_prob(const Denoiser& den, const NoiseSchedule& sched, const Tensor& x_prev,
                        const Tensor& x_t, std::size_t t, const Tensor& c,
                        double guidance_scale) {
    Tensor xp = Tensor::zeros({1, x_prev.size()});
    Tensor xt = Tensor::zeros({1, x_t.size()});
    Tensor ctx = Tensor::zeros({1, c.size()});
    for (std::size_t j = 0; j < x_prev.size(); ++j) xp.at(0, j) = x_prev[j];
    for (std::size_t j = 0; j < x_t.size(); ++j) xt.at(0, j) = x_t[j];
    for (std::size_t j = 0; j < c.size(); ++j) ctx.at(0, j) = c[j];
    return transition_log_prob_rows(den, sched, xp, xt, t, ctx, guidance_scale);
}

}  // namespace tdpo::ddpm
