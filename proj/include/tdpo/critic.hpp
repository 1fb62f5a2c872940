#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "tdpo/rewards.hpp"

namespace tdpo::critic {

/// Residual predictor over shared-encoder embeddings: a 5-layer ReLU MLP
/// regressed to the trajectory's final reward. The temporal reward of an
/// intermediate state is the final reward minus this prediction.
class CriticState {
public:
    struct Config {
        // full-scale head output widths, scaled down by `width_divisor`
        std::vector<std::size_t> base_widths = {1024, 128, 64, 16, 1};
        std::size_t width_divisor = 4;
        double clip_range = 0.2;
        ad::Dtype dtype = ad::Dtype::f64;
    };

    CriticState(std::shared_ptr<const rewards::Encoder> encoder, const Config& cfg,
                std::uint64_t seed);

    /// Differentiable prediction for a batch of states; t enters through the
    /// encoder's timestep embedding.
    ad::Var predict(const ad::Tensor& x, const std::vector<int>& ts,
                    const ad::Tensor& c) const;
    std::vector<double> predict_values(const ad::Tensor& x, const std::vector<int>& ts,
                                       const ad::Tensor& c) const;

    std::vector<ad::Var> params();
    const std::vector<nn::LinearLayer>& layers() const { return layers_; }
    std::vector<nn::LinearLayer>& layers() { return layers_; }

    /// Post-nonlinearity hidden activations per module for a probe batch,
    /// one (B, width) tensor per hidden layer.
    std::vector<ad::Tensor> hidden_activations(const ad::Tensor& x,
                                               const std::vector<int>& ts,
                                               const ad::Tensor& c) const;

    const rewards::Encoder& encoder() const { return *encoder_; }
    std::shared_ptr<const rewards::Encoder> encoder_ptr() const { return encoder_; }
    const Config& config() const { return cfg_; }
    std::uint64_t init_seed() const { return seed_; }

    std::map<std::string, ad::Tensor> state_dict() const;
    void load_state_dict(const std::map<std::string, ad::Tensor>& st);

private:
    std::shared_ptr<const rewards::Encoder> encoder_;
    Config cfg_;
    std::uint64_t seed_;
    std::vector<nn::LinearLayer> layers_;  // exactly 5
};

/// Final reward minus the residual prediction, evaluated without gradients;
/// the policy loss consumes these as constants.
double temporal_reward(const CriticState& critic, const ad::Tensor& x_t, std::size_t t,
                       const ad::Tensor& c, double final_reward);

/// One batch slice of critic training data at a fixed timestep.
struct CriticBatch {
    ad::Tensor states;    // (B, 2)
    std::vector<int> ts;  // timestep fed to the encoder, one per row
    ad::Tensor contexts;  // (B, 2)
    std::vector<double> final_rewards;          // regression targets
    std::optional<std::vector<double>> p_old;   // collection-time predictions
};

/// Squared error against the final reward with prediction clipping: the
/// per-item loss is the max of the raw and the clipped squared error, the
/// clipped prediction being p_old + clamp(p - p_old, -r, r). Without p_old
/// (first epoch) the raw squared error is used.
ad::Var critic_loss(const CriticState& critic, const CriticBatch& batch);

}  // namespace tdpo::critic
