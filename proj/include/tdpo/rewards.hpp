#pragma once

#include <memory>
#include <string>
#include <vector>

#include "tdpo/dataset.hpp"
#include "tdpo/denoiser.hpp"
#include "tdpo/nn.hpp"
#include "tdpo/schedule.hpp"

namespace tdpo::rewards {

enum class Kind { direction, fidelity, radius };

Kind kind_from_string(const std::string& name);
std::string kind_name(Kind k);

/// Frozen random feature map psi(x, t, c): a fixed randomly-initialized
/// two-layer tanh network over (x, timestep embedding, context). Weights
/// never change after construction; two encoders are aligned iff they share
/// a seed id.
class Encoder {
public:
    Encoder(std::uint64_t seed, std::size_t width = 128, std::size_t t_embed_dim = 16,
            ad::Dtype dtype = ad::Dtype::f64);

    ad::Var encode(const ad::Tensor& x, const std::vector<int>& ts,
                   const ad::Tensor& c) const;

    std::uint64_t seed_id() const { return seed_; }
    std::size_t width() const { return width_; }
    bool aligned_with(const Encoder& other) const { return seed_ == other.seed_; }

    std::uint64_t weights_hash() const;

private:
    std::uint64_t seed_;
    std::size_t width_;
    std::size_t t_embed_dim_;
    nn::LinearLayer l1_, l2_;
};

/// Ground-truth reward formulas; evaluation oracles independent of any
/// fitted model. direction = tanh(x . c); fidelity is the per-context
/// component log density affinely mapped so the mode center scores 1;
/// radius = -(|x| - 4)^2.
double analytic_reward(Kind kind, const double x0[2], const double c[2]);
double analytic_reward(Kind kind, const ad::Tensor& x0, const ad::Tensor& c);

/// Scalar head over shared-encoder features, fitted to an analytic target.
struct RewardModel {
    Kind kind = Kind::direction;
    std::shared_ptr<const Encoder> encoder;
    nn::LinearLayer h1, h2;  // width -> 64 -> 1
    double fit_rmse = 0.0;

    double reward(const ad::Tensor& x0, const ad::Tensor& c) const;
    std::vector<double> reward_batch(const ad::Tensor& x0s, const ad::Tensor& cs) const;

    std::uint64_t weights_hash() const;
    void to_state(std::map<std::string, ad::Tensor>& st) const;
    static RewardModel from_state(const std::map<std::string, ad::Tensor>& st, Kind kind,
                                  std::shared_ptr<const Encoder> enc);
};

struct FitDataset {
    ad::Tensor points;    // (N, 2)
    ad::Tensor contexts;  // (N, 2)
};

/// Samples from the pretrained model plus uniform box points, so the head
/// is defined off-manifold as well.
FitDataset build_fit_dataset(const ddpm::Denoiser& den, const ddpm::NoiseSchedule& sched,
                             const data::MixtureSpec& mix, std::size_t n_model,
                             std::size_t n_box, double guidance_scale, std::uint64_t seed,
                             std::size_t workers = 1);

struct FitOptions {
    std::size_t max_steps = 4000;
    std::size_t batch = 256;
    double lr = 1e-2;
    double target_rmse = 0.05;
    double fail_rmse = 0.1;
    std::size_t eval_every = 200;
};

/// Regress a fresh head to the analytic target until the held-out RMSE
/// clears the target or the budget runs out. Throws on fit failure
/// (budget exhausted with RMSE above the failure bound). The returned
/// model is frozen.
RewardModel fit_reward_head(std::shared_ptr<const Encoder> encoder, Kind kind,
                            const FitDataset& dataset, std::uint64_t seed,
                            const FitOptions& opts = {});

/// Target-agnostic fitting core: regress a head to arbitrary per-point
/// targets (last 20% of the dataset is the held-out split).
RewardModel fit_head_to_targets(std::shared_ptr<const Encoder> encoder, Kind kind,
                                const FitDataset& dataset,
                                const std::vector<double>& targets, std::uint64_t seed,
                                const FitOptions& opts);

}  // namespace tdpo::rewards
