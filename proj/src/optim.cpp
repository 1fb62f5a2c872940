#include "tdpo/optim.hpp"

#include <cmath>

namespace tdpo::ad {

AdamW::AdamW(std::vector<Var> params, Options opts)
    : params_(std::move(params)), opts_(opts) {
    states_.reserve(params_.size());
    for (const Var& p : params_)
        states_.push_back({Tensor::zeros(p.value().shape, p.value().dtype),
                           Tensor::zeros(p.value().shape, p.value().dtype)});
}

void AdamW::zero_grad() {
    for (Var& p : params_) p.zero_grad();
}

void AdamW::scale_grads(double factor) {
    for (Var& p : params_)
        for (double& g : p.grad().data) g *= factor;
}

void AdamW::step() {
    double clip_scale = 1.0;
    if (opts_.max_grad_norm > 0.0) {
        double sq = 0.0;
        for (const Var& p : params_)
            for (double g : p.grad().data) sq += g * g;
        double norm = std::sqrt(sq);
        if (norm > opts_.max_grad_norm) clip_scale = opts_.max_grad_norm / norm;
    }
    ++step_count_;
    double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_count_));
    double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_count_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& val = params_[k].value();
        const Tensor& grad = params_[k].grad();
        State& s = states_[k];
        for (std::size_t i = 0; i < val.size(); ++i) {
            double g = grad[i] * clip_scale;
            s.m[i] = opts_.beta1 * s.m[i] + (1.0 - opts_.beta1) * g;
            s.v[i] = opts_.beta2 * s.v[i] + (1.0 - opts_.beta2) * g * g;
            double m_hat = s.m[i] / bc1;
            double v_hat = s.v[i] / bc2;
            val[i] -= opts_.lr * (m_hat / (std::sqrt(v_hat) + opts_.eps) +
                                  opts_.weight_decay * val[i]);
        }
        val.round_to_dtype();
    }
}

void AdamW::reset_moments(std::size_t index, const std::vector<std::size_t>& entries) {
    State& s = states_[index];
    for (std::size_t i : entries) {
        s.m[i] = 0.0;
        s.v[i] = 0.0;
    }
}

std::optional<std::size_t> AdamW::index_of(const Var& p) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (params_[i].node() == p.node()) return i;
    return std::nullopt;
}

}  // namespace tdpo::ad
