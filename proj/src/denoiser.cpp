#include "tdpo/denoiser.hpp"

#include <array>
#include <stdexcept>

namespace tdpo::ddpm {

using ad::Var;

Denoiser Denoiser::create(const Config& cfg, std::uint64_t seed) {
    Denoiser d;
    d.cfg_ = cfg;
    std::uint64_t stream = 0;
    d.ctx_embed_ = nn::LinearLayer::create(2, cfg.ctx_embed_dim, seed, stream, cfg.dtype);
    stream += 2;
    std::size_t in = cfg.data_dim + cfg.t_embed_dim + cfg.ctx_embed_dim;
    for (std::size_t w : cfg.hidden_widths) {
        d.hidden_.push_back(nn::LinearLayer::create(in, w, seed, stream, cfg.dtype));
        stream += 2;
        in = w;
    }
    d.out_ = nn::LinearLayer::create(in, cfg.data_dim, seed, stream, cfg.dtype);
    return d;
}

Var Denoiser::predict_noise(const Var& x, const std::vector<int>& ts, const Var& ctx) const {
    if (x.value().rows() != ts.size() || x.value().rows() != ctx.value().rows())
        throw std::invalid_argument("predict_noise: batch size mismatch");
    Var temb = Var::constant(nn::timestep_embedding(ts, cfg_.t_embed_dim));
    Var cemb = ctx_embed_.affine(ctx);
    std::array<Var, 3> parts{x, temb, cemb};
    Var h = ad::concat_cols(parts);
    for (std::size_t i = 0; i < hidden_.size(); ++i) {
        Var z = hidden_[i].affine(h);
        if (adapter_enabled_ && i < adapters_.size() && adapters_[i].scale != 0.0) {
            const LowRankAdapter& ad_i = adapters_[i];
            Var delta = ad::matmul(ad::matmul(h, ad_i.A), ad_i.B);
            z = ad::add(z, ad::scale(delta, ad_i.scale));
        }
        h = ad::tanh_(z);
    }
    return out_.affine(h);
}

Var Denoiser::guided_noise(const Var& x, const std::vector<int>& ts, const Var& ctx,
                           double guidance_scale) const {
    if (guidance_scale == 1.0) return predict_noise(x, ts, ctx);
    Var null_ctx = Var::constant(ad::Tensor::zeros(ctx.value().shape));
    if (guidance_scale == 0.0) return predict_noise(x, ts, null_ctx);
    Var eps_c = predict_noise(x, ts, ctx);
    Var eps_u = predict_noise(x, ts, null_ctx);
    return ad::add(eps_u, ad::scale(ad::sub(eps_c, eps_u), guidance_scale));
}

void Denoiser::attach_adapter(std::size_t rank, double scale, std::uint64_t seed) {
    if (rank < 1) throw std::invalid_argument("attach_adapter: rank must be >= 1");
    if (!adapters_.empty()) throw std::invalid_argument("attach_adapter: already attached");
    std::uint64_t stream = 1000;
    for (const nn::LinearLayer& layer : hidden_) {
        std::size_t in = layer.in_dim(), out = layer.out_dim();
        if (rank > in || rank > out)
            throw std::invalid_argument("attach_adapter: rank exceeds layer width");
        LowRankAdapter a;
        a.rank = rank;
        a.scale = scale;
        a.a_init = ad::InitSpec::uniform(in, stream);
        a.b_init = ad::InitSpec::zero(stream + 1);
        ad::Tensor at = ad::Tensor::zeros({in, rank}, cfg_.dtype);
        Rng ra = Rng::stream(seed, a.a_init.seed_stream);
        a.a_init.fill(at, ra);
        a.A = Var::parameter(std::move(at));
        a.B = Var::parameter(ad::Tensor::zeros({rank, out}, cfg_.dtype));
        adapters_.push_back(std::move(a));
        stream += 2;
    }
    set_base_trainable(false);
}

std::vector<ad::Tensor> Denoiser::adapter_bottleneck_activations(
    const ad::Tensor& x, const std::vector<int>& ts, const ad::Tensor& c) const {
    ad::NoGradGuard ng;
    std::vector<ad::Tensor> acts;
    Var temb = Var::constant(nn::timestep_embedding(ts, cfg_.t_embed_dim));
    Var cemb = ctx_embed_.affine(Var::constant(c));
    std::array<Var, 3> parts{Var::constant(x), temb, cemb};
    Var h = ad::concat_cols(parts);
    for (std::size_t i = 0; i < hidden_.size(); ++i) {
        if (i < adapters_.size()) acts.push_back(ad::matmul(h, adapters_[i].A).value());
        Var z = hidden_[i].affine(h);
        if (adapter_enabled_ && i < adapters_.size() && adapters_[i].scale != 0.0) {
            const LowRankAdapter& ad_i = adapters_[i];
            Var delta = ad::matmul(ad::matmul(h, ad_i.A), ad_i.B);
            z = ad::add(z, ad::scale(delta, ad_i.scale));
        }
        h = ad::tanh_(z);
    }
    return acts;
}

std::vector<Var> Denoiser::base_params() {
    std::vector<Var> out{ctx_embed_.W, ctx_embed_.b};
    for (nn::LinearLayer& l : hidden_) {
        out.push_back(l.W);
        out.push_back(l.b);
    }
    out.push_back(out_.W);
    out.push_back(out_.b);
    return out;
}

std::vector<Var> Denoiser::adapter_params() {
    std::vector<Var> out;
    for (LowRankAdapter& a : adapters_) {
        out.push_back(a.A);
        out.push_back(a.B);
    }
    return out;
}

void Denoiser::set_base_trainable(bool on) {
    ctx_embed_.set_trainable(on);
    for (nn::LinearLayer& l : hidden_) l.set_trainable(on);
    out_.set_trainable(on);
}

std::map<std::string, ad::Tensor> Denoiser::state_dict() const {
    std::map<std::string, ad::Tensor> st;
    ctx_embed_.to_state(st, "denoiser/ctx_embed");
    for (std::size_t i = 0; i < hidden_.size(); ++i)
        hidden_[i].to_state(st, "denoiser/hidden." + std::to_string(i));
    out_.to_state(st, "denoiser/out");
    for (std::size_t i = 0; i < adapters_.size(); ++i) {
        st["denoiser/adapter." + std::to_string(i) + ".A"] = adapters_[i].A.value();
        st["denoiser/adapter." + std::to_string(i) + ".B"] = adapters_[i].B.value();
    }
    return st;
}

void Denoiser::load_state_dict(const std::map<std::string, ad::Tensor>& st) {
    ctx_embed_.from_state(st, "denoiser/ctx_embed");
    for (std::size_t i = 0; i < hidden_.size(); ++i)
        hidden_[i].from_state(st, "denoiser/hidden." + std::to_string(i));
    out_.from_state(st, "denoiser/out");
    for (std::size_t i = 0; i < adapters_.size(); ++i) {
        adapters_[i].A.value() = st.at("denoiser/adapter." + std::to_string(i) + ".A");
        adapters_[i].B.value() = st.at("denoiser/adapter." + std::to_string(i) + ".B");
    }
}

}  // namespace tdpo::ddpm
