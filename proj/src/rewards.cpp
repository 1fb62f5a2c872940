#include "tdpo/rewards.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include "tdpo/checkpoint.hpp"
#include "tdpo/diffusion.hpp"
#include "tdpo/optim.hpp"

namespace tdpo::rewards {

using ad::Tensor;
using ad::Var;

Kind kind_from_string(const std::string& name) {
    if (name == "direction") return Kind::direction;
    if (name == "fidelity") return Kind::fidelity;
    if (name == "radius") return Kind::radius;
    throw std::invalid_argument("unknown reward kind: " + name);
}

std::string kind_name(Kind k) {
    switch (k) {
        case Kind::direction: return "direction";
        case Kind::fidelity: return "fidelity";
        case Kind::radius: return "radius";
    }
    return "?";
}

Encoder::Encoder(std::uint64_t seed, std::size_t width, std::size_t t_embed_dim,
                 ad::Dtype dtype)
    : seed_(seed), width_(width), t_embed_dim_(t_embed_dim) {
    std::size_t in = 2 + t_embed_dim + 2;
    std::size_t mid = 2 * width;
    Rng rng = Rng::stream(seed, 7000);
    // random-feature scales chosen so sample coordinates (radius-4 data) and
    // unit-scale context/timestep features contribute comparably, with bias
    // offsets spreading the tanh transition positions across the domain
    Tensor w1 = Tensor::zeros({in, mid});
    for (std::size_t i = 0; i < in; ++i) {
        double s = 4.0 / std::sqrt(static_cast<double>(in));
        for (std::size_t j = 0; j < mid; ++j) w1.at(i, j) = s * rng.normal();
    }
    Tensor b1 = Tensor::zeros({mid});
    for (double& v : b1.data) v = rng.uniform(-1.0, 1.0);
    Tensor w2 = Tensor::zeros({mid, width});
    double s2 = 1.5 / std::sqrt(static_cast<double>(mid));
    for (double& v : w2.data) v = s2 * rng.normal();
    Tensor b2 = Tensor::zeros({width});
    for (double& v : b2.data) v = rng.uniform(-0.5, 0.5);

    w1.dtype = b1.dtype = w2.dtype = b2.dtype = dtype;
    w1.round_to_dtype();
    b1.round_to_dtype();
    w2.round_to_dtype();
    b2.round_to_dtype();
    l1_.W = ad::Var::constant(std::move(w1));
    l1_.b = ad::Var::constant(std::move(b1));
    l2_.W = ad::Var::constant(std::move(w2));
    l2_.b = ad::Var::constant(std::move(b2));
}

Var Encoder::encode(const Tensor& x, const std::vector<int>& ts, const Tensor& c) const {
    if (x.rows() != ts.size() || x.rows() != c.rows())
        throw std::invalid_argument("encode: batch size mismatch");
    Var temb = Var::constant(nn::timestep_embedding(ts, t_embed_dim_));
    std::array<Var, 3> parts{Var::constant(x), temb, Var::constant(c)};
    Var h = ad::tanh_(l1_.affine(ad::concat_cols(parts)));
    return ad::tanh_(l2_.affine(h));
}

std::uint64_t Encoder::weights_hash() const {
    std::uint64_t h = ad::content_hash(l1_.W.value());
    h ^= ad::content_hash(l1_.b.value()) * 0x9e3779b97f4a7c15ULL;
    h ^= ad::content_hash(l2_.W.value()) * 0xc2b2ae3d27d4eb4fULL;
    h ^= ad::content_hash(l2_.b.value());
    return h;
}

namespace {

// fidelity: component log density shifted/scaled so the mode center maps to
// 1 and a 4-sigma contour to 0
constexpr double kFidelityRange = 8.0;

}  // namespace

double analytic_reward(Kind kind, const double x0[2], const double c[2]) {
    switch (kind) {
        case Kind::direction:
            return std::tanh(x0[0] * c[0] + x0[1] * c[1]);
        case Kind::fidelity: {
            data::MixtureSpec mix;
            double logp = data::component_log_density(mix, x0, c);
            double logp_max = -std::log(2.0 * 3.14159265358979323846 * mix.mode_std *
                                        mix.mode_std);
            return 1.0 + (logp - logp_max) / kFidelityRange;
        }
        case Kind::radius: {
            data::MixtureSpec mix;
            double r = std::hypot(x0[0], x0[1]);
            return -(r - mix.radius) * (r - mix.radius);
        }
    }
    throw std::invalid_argument("unknown reward kind");
}

double analytic_reward(Kind kind, const Tensor& x0, const Tensor& c) {
    double xv[2] = {x0[0], x0[1]};
    double cv[2] = {c[0], c[1]};
    return analytic_reward(kind, xv, cv);
}

double RewardModel::reward(const Tensor& x0, const Tensor& c) const {
    Tensor xb = Tensor::from({1, 2}, {x0[0], x0[1]});
    Tensor cb = Tensor::from({1, 2}, {c[0], c[1]});
    return reward_batch(xb, cb)[0];
}

std::vector<double> RewardModel::reward_batch(const Tensor& x0s, const Tensor& cs) const {
    ad::NoGradGuard ng;
    std::vector<int> ts(x0s.rows(), 0);
    Var feats = encoder->encode(x0s, ts, cs);
    Var out = h2.affine(ad::tanh_(h1.affine(feats)));
    return out.value().data;
}

std::uint64_t RewardModel::weights_hash() const {
    std::uint64_t h = encoder->weights_hash();
    h ^= ad::content_hash(h1.W.value()) * 0x9e3779b97f4a7c15ULL;
    h ^= ad::content_hash(h1.b.value());
    h ^= ad::content_hash(h2.W.value()) * 0xc2b2ae3d27d4eb4fULL;
    h ^= ad::content_hash(h2.b.value());
    return h;
}

void RewardModel::to_state(std::map<std::string, ad::Tensor>& st) const {
    std::string p = "reward/" + kind_name(kind);
    h1.to_state(st, p + "/h1");
    h2.to_state(st, p + "/h2");
    st[p + "/meta"] = Tensor::from(
        {3}, {static_cast<double>(encoder->seed_id()),
              static_cast<double>(encoder->width()), fit_rmse});
}

RewardModel RewardModel::from_state(const std::map<std::string, ad::Tensor>& st, Kind kind,
                                    std::shared_ptr<const Encoder> enc) {
    RewardModel m;
    m.kind = kind;
    m.encoder = std::move(enc);
    std::string p = "reward/" + kind_name(kind);
    const Tensor& meta = st.at(p + "/meta");
    if (static_cast<std::uint64_t>(meta[0]) != m.encoder->seed_id() ||
        static_cast<std::size_t>(meta[1]) != m.encoder->width())
        throw std::runtime_error("reward model checkpoint does not match encoder");
    m.h1 = nn::LinearLayer::create(m.encoder->width(), 128, 0, 7100);
    m.h2 = nn::LinearLayer::create(128, 1, 0, 7102);
    m.h1.from_state(st, p + "/h1");
    m.h2.from_state(st, p + "/h2");
    m.h1.set_trainable(false);
    m.h2.set_trainable(false);
    m.fit_rmse = meta[2];
    return m;
}

FitDataset build_fit_dataset(const ddpm::Denoiser& den, const ddpm::NoiseSchedule& sched,
                             const data::MixtureSpec& mix, std::size_t n_model,
                             std::size_t n_box, double guidance_scale, std::uint64_t seed,
                             std::size_t workers) {
    std::size_t n = n_model + n_box;
    FitDataset ds;
    ds.points = Tensor::zeros({n, 2});
    ds.contexts = Tensor::zeros({n, 2});
    Rng rng = Rng::stream(seed, 31);

    auto angles = mix.mode_angles();
    Tensor ctxs = Tensor::zeros({n_model, 2});
    for (std::size_t i = 0; i < n_model; ++i) {
        double psi = angles[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(angles.size()) - 1))];
        ctxs.at(i, 0) = std::cos(psi);
        ctxs.at(i, 1) = std::sin(psi);
    }
    std::vector<std::uint64_t> seeds(n_model);
    for (std::size_t i = 0; i < n_model; ++i)
        seeds[i] = ddpm::derive_trajectory_seed(seed, i);
    auto trajectories =
        ddpm::sample_trajectories(den, sched, ctxs, guidance_scale, seeds, workers);
    for (std::size_t i = 0; i < n_model; ++i) {
        ds.points.at(i, 0) = trajectories[i].x[0][0];
        ds.points.at(i, 1) = trajectories[i].x[0][1];
        ds.contexts.at(i, 0) = ctxs.at(i, 0);
        ds.contexts.at(i, 1) = ctxs.at(i, 1);
    }
    double box = 2.5 * mix.radius;
    for (std::size_t i = n_model; i < n; ++i) {
        ds.points.at(i, 0) = rng.uniform(-box, box);
        ds.points.at(i, 1) = rng.uniform(-box, box);
        double psi = angles[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(angles.size()) - 1))];
        ds.contexts.at(i, 0) = std::cos(psi);
        ds.contexts.at(i, 1) = std::sin(psi);
    }
    // deterministic shuffle so the tail holdout split mixes model and box
    // points instead of isolating whichever group was appended last
    for (std::size_t i = n - 1; i > 0; --i) {
        std::size_t j = static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(i)));
        for (std::size_t k = 0; k < 2; ++k) {
            std::swap(ds.points.at(i, k), ds.points.at(j, k));
            std::swap(ds.contexts.at(i, k), ds.contexts.at(j, k));
        }
    }
    return ds;
}

RewardModel fit_reward_head(std::shared_ptr<const Encoder> encoder, Kind kind,
                            const FitDataset& dataset, std::uint64_t seed,
                            const FitOptions& opts) {
    std::size_t n = dataset.points.rows();
    std::vector<double> targets(n);
    for (std::size_t i = 0; i < n; ++i) {
        double x[2] = {dataset.points.at(i, 0), dataset.points.at(i, 1)};
        double c[2] = {dataset.contexts.at(i, 0), dataset.contexts.at(i, 1)};
        targets[i] = analytic_reward(kind, x, c);
    }
    return fit_head_to_targets(std::move(encoder), kind, dataset, targets, seed, opts);
}

RewardModel fit_head_to_targets(std::shared_ptr<const Encoder> encoder, Kind kind,
                                const FitDataset& dataset,
                                const std::vector<double>& targets, std::uint64_t seed,
                                const FitOptions& opts) {
    std::size_t n = dataset.points.rows();
    if (n < 16) throw std::invalid_argument("fit_reward_head: dataset too small");
    if (targets.size() != n)
        throw std::invalid_argument("fit_reward_head: one target per point required");

    RewardModel m;
    m.kind = kind;
    m.encoder = encoder;
    m.h1 = nn::LinearLayer::create(encoder->width(), 128, seed, 7100);
    m.h2 = nn::LinearLayer::create(128, 1, seed, 7102);

    // the encoder is frozen, so its features are computed once up front
    Tensor feats_all;
    {
        ad::NoGradGuard ng;
        std::vector<int> ts(n, 0);
        feats_all = encoder->encode(dataset.points, ts, dataset.contexts).value();
    }
    std::size_t fw = encoder->width();

    // last 20% is the held-out split
    std::size_t holdout_lo = n - n / 5;

    auto eval_rmse = [&](std::size_t lo, std::size_t hi) {
        ad::NoGradGuard ng;
        std::size_t k = hi - lo;
        Tensor fs = Tensor::zeros({k, fw});
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < fw; ++j) fs.at(i, j) = feats_all.at(lo + i, j);
        Var pred = m.h2.affine(ad::tanh_(m.h1.affine(Var::constant(fs))));
        double se = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            double d = pred.value()[i] - targets[lo + i];
            se += d * d;
        }
        return std::sqrt(se / static_cast<double>(k));
    };

    ad::AdamW opt({m.h1.W, m.h1.b, m.h2.W, m.h2.b},
                  {.lr = opts.lr, .weight_decay = 0.0, .max_grad_norm = 0.0});
    Rng rng = Rng::stream(seed, 77);
    double rmse = 1e300;
    for (std::size_t step = 1; step <= opts.max_steps; ++step) {
        // staircase decay over the budget
        if (step == opts.max_steps / 2) opt.options().lr = opts.lr / 3.0;
        if (step == (4 * opts.max_steps) / 5) opt.options().lr = opts.lr / 10.0;
        std::size_t B = std::min(opts.batch, holdout_lo);
        Tensor fs = Tensor::zeros({B, fw});
        Tensor ys = Tensor::zeros({B, 1});
        for (std::size_t i = 0; i < B; ++i) {
            std::size_t idx = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(holdout_lo) - 1));
            for (std::size_t j = 0; j < fw; ++j) fs.at(i, j) = feats_all.at(idx, j);
            ys.at(i, 0) = targets[idx];
        }
        Var pred = m.h2.affine(ad::tanh_(m.h1.affine(Var::constant(fs))));
        Var loss = ad::mean(ad::square(ad::sub(pred, Var::constant(ys))));
        opt.zero_grad();
        ad::backward(loss);
        opt.step();

        if (step % opts.eval_every == 0 || step == opts.max_steps) {
            rmse = eval_rmse(holdout_lo, n);
            if (rmse <= opts.target_rmse) break;
        }
    }
    if (rmse > opts.fail_rmse)
        throw std::runtime_error("fit_reward_head: budget exhausted with RMSE " +
                                 std::to_string(rmse) + " for " + kind_name(kind));
    m.fit_rmse = rmse;
    m.h1.set_trainable(false);
    m.h2.set_trainable(false);
    return m;
}

}  // namespace tdpo::rewards
