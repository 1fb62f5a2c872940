#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tdpo/nn.hpp"
#include "tdpo/rng.hpp"

namespace tdpo::ddpm {

/// Additive low-rank factor for one dense layer: effective weight is
/// W + scale * A * B. B starts at zero so attaching is a no-op on outputs.
struct LowRankAdapter {
    ad::Var A;  // (in, rank)
    ad::Var B;  // (rank, out)
    double scale = 1.0;
    std::size_t rank = 0;
    ad::InitSpec a_init, b_init;
};

/// Conditional noise-prediction MLP. Input features are the sample, a
/// sinusoidal timestep embedding and a trained linear embedding of the
/// 2-D context; hidden layers use tanh. The null context for
/// classifier-free guidance is the zero vector (real contexts are unit
/// vectors, so the null token is distinguishable).
class Denoiser {
public:
    struct Config {
        std::vector<std::size_t> hidden_widths = {64, 64, 64};
        std::size_t t_embed_dim = 16;
        std::size_t ctx_embed_dim = 16;
        std::size_t data_dim = 2;
        ad::Dtype dtype = ad::Dtype::f64;
    };

    static Denoiser create(const Config& cfg, std::uint64_t seed);

    /// Predicted noise for a batch: x (B,d), per-row timesteps, ctx (B,2).
    ad::Var predict_noise(const ad::Var& x, const std::vector<int>& ts,
                          const ad::Var& ctx) const;

    /// Classifier-free-guided estimate eps_u + s (eps_c - eps_u). s == 1
    /// short-circuits to the conditional pass (bit-identical to unguided),
    /// s == 0 to the unconditional pass.
    ad::Var guided_noise(const ad::Var& x, const std::vector<int>& ts, const ad::Var& ctx,
                         double guidance_scale) const;

    /// Attach rank-r adapters to every hidden layer and freeze the base.
    void attach_adapter(std::size_t rank, double scale, std::uint64_t seed);
    bool has_adapter() const { return !adapters_.empty(); }

    /// When off, adapters are bypassed (scale treated as zero); used for the
    /// pretrained-policy log probabilities of the KL baseline.
    void set_adapter_enabled(bool on) { adapter_enabled_ = on; }

    std::vector<ad::Var> base_params();
    std::vector<ad::Var> adapter_params();

    /// Raw bottleneck activations h . A per adapter layer (B, rank); the
    /// adapter "neurons" probed by the neuron lab.
    std::vector<ad::Tensor> adapter_bottleneck_activations(const ad::Tensor& x,
                                                           const std::vector<int>& ts,
                                                           const ad::Tensor& c) const;

    void set_base_trainable(bool on);

    std::map<std::string, ad::Tensor> state_dict() const;
    void load_state_dict(const std::map<std::string, ad::Tensor>& st);

    const Config& config() const { return cfg_; }
    const std::vector<nn::LinearLayer>& hidden_layers() const { return hidden_; }
    std::vector<LowRankAdapter>& adapters() { return adapters_; }
    const std::vector<LowRankAdapter>& adapters() const { return adapters_; }

private:
    Config cfg_;
    nn::LinearLayer ctx_embed_;
    std::vector<nn::LinearLayer> hidden_;
    nn::LinearLayer out_;
    std::vector<LowRankAdapter> adapters_;  // parallel to hidden_ when attached
    bool adapter_enabled_ = true;
};

}  // namespace tdpo::ddpm
