#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "tdpo/rng.hpp"

namespace tdpo::ad {

enum class Dtype : std::uint8_t { f64 = 0, f32 = 1 };

/// Dense row-major real tensor. Storage is always double; in f32 mode every
/// kernel rounds its result through float so all intermediates are exactly
/// representable in single precision.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    Dtype dtype = Dtype::f64;

    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, Dtype dt = Dtype::f64) {
        Tensor t;
        t.shape = std::move(shape);
        t.dtype = dt;
        t.data.assign(t.extent(), 0.0);
        return t;
    }

    static Tensor full(std::vector<std::size_t> shape, double value, Dtype dt = Dtype::f64) {
        Tensor t = zeros(std::move(shape), dt);
        for (double& v : t.data) v = value;
        t.round_to_dtype();
        return t;
    }

    static Tensor scalar(double value, Dtype dt = Dtype::f64) {
        return full({1}, value, dt);
    }

    static Tensor from(std::vector<std::size_t> shape, std::vector<double> values,
                       Dtype dt = Dtype::f64) {
        Tensor t;
        t.shape = std::move(shape);
        t.data = std::move(values);
        t.dtype = dt;
        if (t.data.size() != t.extent())
            throw std::invalid_argument("tensor: data length does not match shape");
        t.round_to_dtype();
        return t;
    }

    std::size_t extent() const {
        std::size_t n = 1;
        for (std::size_t e : shape) n *= e;
        return n;
    }

    std::size_t size() const { return data.size(); }
    bool is_scalar() const { return data.size() == 1; }

    std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(double v) {
        for (double& x : data) x = v;
        round_to_dtype();
    }

    /// In f32 mode, snap every entry to the nearest float. No-op for f64.
    void round_to_dtype() {
        if (dtype == Dtype::f32)
            for (double& x : data) x = static_cast<double>(static_cast<float>(x));
    }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape.size(); ++i)
            s += (i ? "," : "") + std::to_string(shape[i]);
        return s + ")";
    }
};

/// Sampling recipe for a parameter tensor. Persisted with the layer so
/// resets can redraw individual rows/columns from the original distribution.
struct InitSpec {
    enum class Kind : std::uint8_t { uniform_fan_in = 0, normal = 1, zeros = 2 };

    Kind kind = Kind::zeros;
    double scale = 1.0;        // bound multiplier (uniform) or std (normal)
    std::size_t fan_in = 1;    // uniform bound = scale / sqrt(fan_in)
    std::uint64_t seed_stream = 0;

    static InitSpec uniform(std::size_t fan_in, std::uint64_t stream, double scale = 1.0) {
        return {Kind::uniform_fan_in, scale, fan_in, stream};
    }
    static InitSpec gaussian(double std, std::uint64_t stream) {
        return {Kind::normal, std, 1, stream};
    }
    static InitSpec zero(std::uint64_t stream = 0) { return {Kind::zeros, 0.0, 1, stream}; }

    double draw(Rng& rng) const {
        switch (kind) {
            case Kind::uniform_fan_in: {
                double bound = scale / std::sqrt(static_cast<double>(fan_in));
                return rng.uniform(-bound, bound);
            }
            case Kind::normal:
                return scale * rng.normal();
            case Kind::zeros:
                return 0.0;
        }
        return 0.0;
    }

    void fill(Tensor& t, Rng& rng) const {
        for (double& v : t.data) v = draw(rng);
        t.round_to_dtype();
    }
};

}  // namespace tdpo::ad
