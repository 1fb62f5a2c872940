#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "tdpo/autodiff.hpp"

namespace tdpo::ad {

/// AdamW with decoupled weight decay and global gradient-norm clipping over
/// the whole parameter group. step() consumes the gradients accumulated on
/// the parameters and leaves them untouched (call zero_grad() between
/// accumulation spans).
class AdamW {
public:
    struct Options {
        double lr = 1e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 1e-4;
        double max_grad_norm = 1.0;  // <= 0 disables clipping
    };

    AdamW(std::vector<Var> params, Options opts);

    void step();
    void zero_grad();

    /// Divide accumulated gradients by n (averaging over an accumulation span).
    void scale_grads(double factor);

    Options& options() { return opts_; }
    const std::vector<Var>& params() const { return params_; }
    std::int64_t step_count() const { return step_count_; }

    /// Zero the Adam moments of selected entries of parameter `index`
    /// (used when weights are re-drawn by a neuron reset).
    void reset_moments(std::size_t index, const std::vector<std::size_t>& entries);

    /// Position of a parameter in this optimizer's group, if present.
    std::optional<std::size_t> index_of(const Var& p) const;

private:
    struct State {
        Tensor m, v;
    };
    std::vector<Var> params_;
    std::vector<State> states_;
    Options opts_;
    std::int64_t step_count_ = 0;
};

}  // namespace tdpo::ad
