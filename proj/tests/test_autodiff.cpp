#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "tdpo/autodiff.hpp"
#include "tdpo/checkpoint.hpp"
#include "tdpo/optim.hpp"
#include "tdpo/rng.hpp"

using namespace tdpo;
using namespace tdpo::ad;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = scale * rng.normal();
    return t;
}

// small 3-layer tanh composition used as the generic fd target
Var three_layer(const Var& x, const Var& w1, const Var& w2, const Var& w3) {
    Var h1 = tanh_(matmul(x, w1));
    Var h2 = tanh_(matmul(h1, w2));
    return sum(matmul(h2, w3));
}

}  // namespace

TEST_CASE("gradient of sum is all ones") {
    Rng rng(7);
    Var p = Var::parameter(random_tensor({3, 4}, rng));
    auto grads = gradient(sum(p), {p});
    for (double g : grads[0].data) CHECK(g == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("gradient of p*p at p=3 is 6") {
    Var p = Var::parameter(Tensor::scalar(3.0));
    auto grads = gradient(mul(p, p), {p});
    CHECK(grads[0][0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("random 3-layer composition matches central differences") {
    // redraw until every analytic entry is well away from zero: central
    // differences lose all significance on entries whose gradient is
    // dominated by float cancellation noise
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Var x, w1, w2, w3;
        for (int attempt = 0; attempt < 100; ++attempt) {
            x = Var::constant(random_tensor({2, 5}, rng));
            w1 = Var::parameter(random_tensor({5, 6}, rng, 0.3));
            w2 = Var::parameter(random_tensor({6, 6}, rng, 0.3));
            w3 = Var::parameter(random_tensor({6, 1}, rng, 0.3));
            auto grads = gradient(three_layer(x, w1, w2, w3), {w1, w2, w3});
            double lo = 1e300;
            for (const Tensor& g : grads)
                for (double v : g.data) lo = std::min(lo, std::abs(v));
            if (lo >= 1e-3) break;
        }
        double err = finite_difference_check(
            [&] { return three_layer(x, w1, w2, w3); }, {w1, w2, w3}, 1e-6);
        CHECK(err <= 1e-6);
    }
}

TEST_CASE("finite difference on a linear map is near exact") {
    Rng rng(3);
    Var x = Var::constant(random_tensor({4, 3}, rng));
    Var w = Var::parameter(random_tensor({3, 2}, rng));
    double err = finite_difference_check([&] { return sum(matmul(x, w)); }, {w}, 1e-6);
    CHECK(err <= 1e-10);
}

TEST_CASE("finite difference on a constant expression reports zero error") {
    Var p = Var::parameter(Tensor::scalar(2.0));
    // p participates but the expression is p - p == 0 with zero gradient
    double err = finite_difference_check([&] { return sub(p, p); }, {p}, 1e-6);
    CHECK(err == 0.0);
}

TEST_CASE("gradient is linear in the expression") {
    Rng rng(11);
    Var p = Var::parameter(random_tensor({6}, rng));
    auto f = [&] { return sum(square(p)); };
    auto g = [&] { return sum(tanh_(p)); };
    double a = 0.7, b = -1.3;
    auto grad_f = gradient(f(), {p})[0];
    auto grad_g = gradient(g(), {p})[0];
    auto grad_combo = gradient(add(scale(f(), a), scale(g(), b)), {p})[0];
    for (std::size_t i = 0; i < grad_combo.size(); ++i)
        CHECK(std::abs(grad_combo[i] - (a * grad_f[i] + b * grad_g[i])) <= 1e-12);
}

TEST_CASE("repeated backward on a rebuilt identical graph is bit-identical") {
    Rng rng(23);
    Tensor w0 = random_tensor({5, 5}, rng);
    Tensor x0 = random_tensor({3, 5}, rng);
    auto run = [&]() {
        Var w = Var::parameter(w0);
        Var x = Var::constant(x0);
        return gradient(sum(tanh_(matmul(x, w))), {w})[0];
    };
    Tensor g1 = run();
    Tensor g2 = run();
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("gradient rejects non-scalar roots and foreign parameters") {
    Rng rng(1);
    Var p = Var::parameter(random_tensor({2, 2}, rng));
    Var q = Var::parameter(random_tensor({2, 2}, rng));
    CHECK_THROWS_AS((void)gradient(square(p), {p}), std::invalid_argument);
    CHECK_THROWS_AS((void)gradient(sum(square(p)), {q}), std::invalid_argument);
}

TEST_CASE("gaussian log density closed forms") {
    const double log2pi = std::log(2.0 * 3.14159265358979323846);
    SUBCASE("zero deviation") {
        for (std::size_t d : {1u, 3u, 8u}) {
            Var x = Var::constant(Tensor::zeros({d}));
            Var m = Var::constant(Tensor::zeros({d}));
            Var s = Var::constant(Tensor::scalar(1.0));
            double v = gaussian_log_density(x, m, s).value()[0];
            CHECK(v == doctest::Approx(-0.5 * double(d) * log2pi).epsilon(1e-12));
        }
    }
    SUBCASE("unit deviation in 1-D") {
        Var x = Var::constant(Tensor::scalar(1.0));
        Var m = Var::constant(Tensor::scalar(0.0));
        Var s = Var::constant(Tensor::scalar(1.0));
        CHECK(gaussian_log_density(x, m, s).value()[0] ==
              doctest::Approx(-1.418939).epsilon(1e-6));
    }
    SUBCASE("scaling deviation and std by k shifts by -d log k") {
        Rng rng(5);
        for (double k : {0.5, 2.0, 7.0}) {
            Tensor dev = random_tensor({4}, rng);
            Tensor devk = dev;
            for (double& v : devk.data) v *= k;
            Var m = Var::constant(Tensor::zeros({4}));
            double base = gaussian_log_density(Var::constant(dev), m,
                                               Var::constant(Tensor::scalar(1.0)))
                              .value()[0];
            double scaled = gaussian_log_density(Var::constant(devk), m,
                                                 Var::constant(Tensor::scalar(k)))
                                .value()[0];
            CHECK(scaled == doctest::Approx(base - 4.0 * std::log(k)).epsilon(1e-10));
        }
    }
    SUBCASE("rejects non-positive std") {
        Var x = Var::constant(Tensor::scalar(0.0));
        Var m = Var::constant(Tensor::scalar(0.0));
        CHECK_THROWS_AS((void)gaussian_log_density(x, m, Var::constant(Tensor::scalar(0.0))),
                        std::invalid_argument);
        CHECK_THROWS_AS((void)gaussian_log_density_rows(x, m, -1.0), std::invalid_argument);
    }
}

TEST_CASE("gaussian log density is differentiable in x, mean and std") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed + 40);
        Var x = Var::parameter(random_tensor({6}, rng));
        Var m = Var::parameter(random_tensor({6}, rng));
        Var s = Var::parameter(Tensor::scalar(0.5 + rng.uniform()));
        double err = finite_difference_check(
            [&] { return gaussian_log_density(x, m, s); }, {x, m, s}, 1e-6);
        CHECK(err <= 1e-6);
    }
}

TEST_CASE("row gaussian log density matches the summed scalar form") {
    Rng rng(9);
    Tensor x = random_tensor({4, 3}, rng);
    Tensor m = random_tensor({4, 3}, rng);
    double sd = 0.7;
    Var rows = gaussian_log_density_rows(Var::constant(x), Var::constant(m), sd);
    double total = 0.0;
    for (double v : rows.value().data) total += v;
    double scalar_form = gaussian_log_density(Var::constant(x), Var::constant(m),
                                              Var::constant(Tensor::scalar(sd)))
                             .value()[0];
    CHECK(total == doctest::Approx(scalar_form).epsilon(1e-12));
}

TEST_CASE("clamp, minimum and maximum route subgradients") {
    Var a = Var::parameter(Tensor::from({3}, {-2.0, 0.5, 3.0}));
    auto g = gradient(sum(clamp(a, 0.0, 1.0)), {a})[0];
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 1.0);
    CHECK(g[2] == 0.0);

    Var b = Var::parameter(Tensor::from({2}, {1.0, 4.0}));
    Var c = Var::parameter(Tensor::from({2}, {2.0, 3.0}));
    auto gm = gradient(sum(minimum(b, c)), {b, c});
    CHECK(gm[0][0] == 1.0);  // b selected
    CHECK(gm[0][1] == 0.0);
    CHECK(gm[1][0] == 0.0);
    CHECK(gm[1][1] == 1.0);  // c selected

    // ties go to the first argument
    Var d = Var::parameter(Tensor::from({1}, {2.0}));
    Var e = Var::parameter(Tensor::from({1}, {2.0}));
    auto gt = gradient(sum(minimum(d, e)), {d, e});
    CHECK(gt[0][0] == 1.0);
    CHECK(gt[1][0] == 0.0);
}

TEST_CASE("leaf gradients accumulate across backward calls") {
    Var p = Var::parameter(Tensor::scalar(2.0));
    backward(sum(square(p)));
    backward(sum(square(p)));
    CHECK(p.grad()[0] == doctest::Approx(8.0).epsilon(1e-14));
    p.zero_grad();
    CHECK(p.grad()[0] == 0.0);
}

TEST_CASE("f32 mode rounds intermediates and relaxes gradient checks") {
    Rng rng(77);
    Var wp, xc;
    for (int attempt = 0; attempt < 100; ++attempt) {
        Tensor w = Tensor::zeros({4, 4}, Dtype::f32);
        for (double& v : w.data) v = 0.4 * rng.normal();
        w.round_to_dtype();
        Tensor x = Tensor::zeros({2, 4}, Dtype::f32);
        for (double& v : x.data) v = rng.normal();
        x.round_to_dtype();
        wp = Var::parameter(w);
        xc = Var::constant(x);
        auto g = gradient(sum(tanh_(matmul(xc, wp))), {wp})[0];
        double lo = 1e300;
        for (double v : g.data) lo = std::min(lo, std::abs(v));
        if (lo >= 1e-2) break;
    }
    Var y = sum(tanh_(matmul(xc, wp)));
    CHECK(y.value()[0] == double(float(y.value()[0])));  // representable in f32
    // wider step: central differences in f32 need h ~ cbrt(eps_f32)
    double err = finite_difference_check([&] { return sum(tanh_(matmul(xc, wp))); },
                                         {wp}, 1e-2);
    CHECK(err <= 1e-3);
}

TEST_CASE("checkpoint container round trips bit-exactly") {
    Rng rng(100);
    std::map<std::string, Tensor> named;
    named["policy/w1"] = random_tensor({5, 3}, rng);
    named["policy/b1"] = random_tensor({3}, rng);
    named["critic/head.W"] = random_tensor({2, 2, 2}, rng);
    Tensor f32t = random_tensor({7}, rng);
    f32t.dtype = Dtype::f32;
    f32t.round_to_dtype();
    named["misc/half"] = f32t;

    std::string path = (std::filesystem::temp_directory_path() / "tdpo_ckpt_test.tdpr").string();
    save_checkpoint(path, named);
    auto loaded = load_checkpoint(path);
    REQUIRE(loaded.size() == named.size());
    for (const auto& [name, t] : named) {
        REQUIRE(loaded.count(name) == 1);
        const Tensor& l = loaded.at(name);
        CHECK(l.shape == t.shape);
        CHECK(l.dtype == t.dtype);
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(l[i] == t[i]);
    }
    std::filesystem::remove(path);
}

TEST_CASE("adamw with zero learning rate leaves parameters bit-identical") {
    Rng rng(55);
    Var p = Var::parameter(random_tensor({4, 4}, rng));
    Tensor before = p.value();
    AdamW opt({p}, {.lr = 0.0});
    backward(sum(square(p)));
    opt.step();
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(p.value()[i] == before[i]);
}

TEST_CASE("adamw clips the global gradient norm") {
    Var p = Var::parameter(Tensor::from({2}, {0.0, 0.0}));
    AdamW::Options o;
    // with eps huge the update reduces to -lr * g_clipped / eps
    o.lr = 1e6;
    o.eps = 1e6;
    o.weight_decay = 0.0;
    o.max_grad_norm = 1.0;
    AdamW opt({p}, o);
    p.grad()[0] = 30.0;
    p.grad()[1] = 40.0;  // norm 50 -> clip scale 1/50 -> (0.6, 0.8)
    opt.step();
    CHECK(p.value()[0] == doctest::Approx(-0.6).epsilon(1e-3));
    CHECK(p.value()[1] == doctest::Approx(-0.8).epsilon(1e-3));
}

TEST_CASE("adamw reset_moments zeroes selected entries only") {
    Var p = Var::parameter(Tensor::from({3}, {1.0, 2.0, 3.0}));
    AdamW opt({p}, {.lr = 1e-3});
    p.grad()[0] = 1.0;
    p.grad()[1] = 1.0;
    p.grad()[2] = 1.0;
    opt.step();
    opt.reset_moments(0, {1});
    opt.zero_grad();
    Tensor before = p.value();
    opt.step();  // moments drive entries 0 and 2; entry 1 moves only by decay
    double d0 = std::abs(p.value()[0] - before[0]);
    double d1 = std::abs(p.value()[1] - before[1]);
    CHECK(d1 < d0);
}
