#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tdpo/autodiff.hpp"
#include "tdpo/rng.hpp"

namespace tdpo::nn {

/// Dense layer with persisted init recipes so neuron resets can redraw
/// individual rows/columns from the original distributions.
struct LinearLayer {
    ad::Var W;  // (in, out)
    ad::Var b;  // (out,)
    ad::InitSpec w_init, b_init;

    static LinearLayer create(std::size_t in, std::size_t out, std::uint64_t seed,
                              std::uint64_t stream_base, ad::Dtype dt = ad::Dtype::f64) {
        LinearLayer l;
        l.w_init = ad::InitSpec::uniform(in, stream_base);
        l.b_init = ad::InitSpec::uniform(in, stream_base + 1);
        ad::Tensor w = ad::Tensor::zeros({in, out}, dt);
        ad::Tensor bias = ad::Tensor::zeros({out}, dt);
        Rng rw = Rng::stream(seed, l.w_init.seed_stream);
        Rng rb = Rng::stream(seed, l.b_init.seed_stream);
        l.w_init.fill(w, rw);
        l.b_init.fill(bias, rb);
        l.W = ad::Var::parameter(std::move(w));
        l.b = ad::Var::parameter(std::move(bias));
        return l;
    }

    ad::Var affine(const ad::Var& x) const { return ad::add_rowvec(ad::matmul(x, W), b); }

    std::size_t in_dim() const { return W.value().shape[0]; }
    std::size_t out_dim() const { return W.value().shape[1]; }

    void set_trainable(bool on) {
        W.set_requires_grad(on);
        b.set_requires_grad(on);
    }

    void to_state(std::map<std::string, ad::Tensor>& st, const std::string& prefix) const {
        st[prefix + ".W"] = W.value();
        st[prefix + ".b"] = b.value();
    }

    void from_state(const std::map<std::string, ad::Tensor>& st, const std::string& prefix) {
        W.value() = st.at(prefix + ".W");
        b.value() = st.at(prefix + ".b");
    }
};

/// Sinusoidal timestep features, one row per batch item.
inline ad::Tensor timestep_embedding(const std::vector<int>& ts, std::size_t dim) {
    if (dim % 2) throw std::invalid_argument("timestep_embedding: dim must be even");
    std::size_t half = dim / 2;
    ad::Tensor out = ad::Tensor::zeros({ts.size(), dim});
    for (std::size_t i = 0; i < ts.size(); ++i) {
        for (std::size_t j = 0; j < half; ++j) {
            double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) /
                                   static_cast<double>(half));
            double arg = static_cast<double>(ts[i]) * freq;
            out.at(i, 2 * j) = std::sin(arg);
            out.at(i, 2 * j + 1) = std::cos(arg);
        }
    }
    return out;
}

}  // namespace tdpo::nn
