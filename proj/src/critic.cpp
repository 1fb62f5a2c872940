#include "tdpo/critic.hpp"

#include <stdexcept>

namespace tdpo::critic {

using ad::Tensor;
using ad::Var;

CriticState::CriticState(std::shared_ptr<const rewards::Encoder> encoder, const Config& cfg,
                         std::uint64_t seed)
    : encoder_(std::move(encoder)), cfg_(cfg), seed_(seed) {
    if (cfg_.base_widths.size() != 5)
        throw std::invalid_argument("critic: head must have exactly 5 layers");
    std::size_t in = encoder_->width();
    std::uint64_t stream = 8000;
    for (std::size_t i = 0; i < cfg_.base_widths.size(); ++i) {
        std::size_t w = cfg_.base_widths[i];
        if (i + 1 < cfg_.base_widths.size()) {
            w = std::max<std::size_t>(1, w / cfg_.width_divisor);
        }
        layers_.push_back(nn::LinearLayer::create(in, w, seed_, stream, cfg_.dtype));
        stream += 2;
        in = w;
    }
}

Var CriticState::predict(const Tensor& x, const std::vector<int>& ts, const Tensor& c) const {
    Var h = encoder_->encode(x, ts, c);
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i)
        h = ad::relu(layers_[i].affine(h));
    Var out = layers_.back().affine(h);  // (B, 1)
    return ad::sum_rows(out);            // (B,)
}

std::vector<double> CriticState::predict_values(const Tensor& x, const std::vector<int>& ts,
                                                const Tensor& c) const {
    ad::NoGradGuard ng;
    return predict(x, ts, c).value().data;
}

std::vector<Var> CriticState::params() {
    std::vector<Var> out;
    for (nn::LinearLayer& l : layers_) {
        out.push_back(l.W);
        out.push_back(l.b);
    }
    return out;
}

std::vector<Tensor> CriticState::hidden_activations(const Tensor& x,
                                                    const std::vector<int>& ts,
                                                    const Tensor& c) const {
    ad::NoGradGuard ng;
    std::vector<Tensor> acts;
    Var h = encoder_->encode(x, ts, c);
    for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
        h = ad::relu(layers_[i].affine(h));
        acts.push_back(h.value());
    }
    return acts;
}

std::map<std::string, Tensor> CriticState::state_dict() const {
    std::map<std::string, Tensor> st;
    for (std::size_t i = 0; i < layers_.size(); ++i)
        layers_[i].to_state(st, "critic/layer." + std::to_string(i));
    return st;
}

void CriticState::load_state_dict(const std::map<std::string, Tensor>& st) {
    for (std::size_t i = 0; i < layers_.size(); ++i)
        layers_[i].from_state(st, "critic/layer." + std::to_string(i));
}

double temporal_reward(const CriticState& critic, const Tensor& x_t, std::size_t t,
                       const Tensor& c, double final_reward) {
    Tensor xb = Tensor::from({1, 2}, {x_t[0], x_t[1]});
    Tensor cb = Tensor::from({1, 2}, {c[0], c[1]});
    std::vector<int> ts{static_cast<int>(t)};
    return final_reward - critic.predict_values(xb, ts, cb)[0];
}

Var critic_loss(const CriticState& critic, const CriticBatch& batch) {
    std::size_t B = batch.states.rows();
    if (B == 0) throw std::invalid_argument("critic_loss: empty batch");
    if (batch.final_rewards.size() != B || batch.ts.size() != B)
        throw std::invalid_argument("critic_loss: field length mismatch");

    Var p = critic.predict(batch.states, batch.ts, batch.contexts);
    Tensor r = Tensor::zeros({B});
    for (std::size_t i = 0; i < B; ++i) r[i] = batch.final_rewards[i];
    Var target = Var::constant(r);
    Var raw = ad::square(ad::sub(p, target));
    if (!batch.p_old.has_value()) return ad::mean(raw);

    if (batch.p_old->size() != B)
        throw std::invalid_argument("critic_loss: p_old length mismatch");
    Tensor po = Tensor::zeros({B});
    for (std::size_t i = 0; i < B; ++i) po[i] = (*batch.p_old)[i];
    Var p_old = Var::constant(po);
    double cr = critic.config().clip_range;
    Var clipped = ad::add(p_old, ad::clamp(ad::sub(p, p_old), -cr, cr));
    Var clipped_err = ad::square(ad::sub(clipped, target));
    return ad::mean(ad::maximum(raw, clipped_err));
}

}  // namespace tdpo::critic
