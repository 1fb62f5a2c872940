#include "tdpo/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tdpo::data {

namespace {
constexpr double kTwoPi = 6.283185307179586476925287;
constexpr double kLogTwoPi = 1.8378770664093454835606594728112;
}  // namespace

std::vector<double> MixtureSpec::mode_angles() const {
    std::vector<double> a(n_modes);
    for (std::size_t k = 0; k < n_modes; ++k)
        a[k] = kTwoPi * static_cast<double>(k) / static_cast<double>(n_modes);
    return a;
}

std::vector<double> MixtureSpec::bisecting_angles() const {
    std::vector<double> a(n_modes);
    double half = kTwoPi / (2.0 * static_cast<double>(n_modes));
    for (std::size_t k = 0; k < n_modes; ++k)
        a[k] = kTwoPi * static_cast<double>(k) / static_cast<double>(n_modes) + half;
    return a;
}

Sample draw(const MixtureSpec& spec, Rng& rng) {
    std::size_t mode = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(spec.n_modes) - 1));
    double psi = kTwoPi * static_cast<double>(mode) / static_cast<double>(spec.n_modes);
    Sample s;
    s.c[0] = std::cos(psi);
    s.c[1] = std::sin(psi);
    s.x[0] = spec.radius * s.c[0] + spec.mode_std * rng.normal();
    s.x[1] = spec.radius * s.c[1] + spec.mode_std * rng.normal();
    return s;
}

void draw_batch(const MixtureSpec& spec, std::size_t n, Rng& rng, ad::Tensor& points,
                ad::Tensor& contexts) {
    points = ad::Tensor::zeros({n, 2});
    contexts = ad::Tensor::zeros({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        Sample s = draw(spec, rng);
        points.at(i, 0) = s.x[0];
        points.at(i, 1) = s.x[1];
        contexts.at(i, 0) = s.c[0];
        contexts.at(i, 1) = s.c[1];
    }
}

double component_log_density(const MixtureSpec& spec, const double x[2], const double c[2]) {
    double mx = spec.radius * c[0];
    double my = spec.radius * c[1];
    double d2 = (x[0] - mx) * (x[0] - mx) + (x[1] - my) * (x[1] - my);
    double var = spec.mode_std * spec.mode_std;
    return -kLogTwoPi - std::log(var) - 0.5 * d2 / var;
}

double rbf_mmd(const std::vector<double>& xs, const std::vector<double>& ys,
               double bandwidth) {
    if (xs.size() % 2 || ys.size() % 2)
        throw std::invalid_argument("rbf_mmd: point lists must be flat (x,y) pairs");
    std::size_t m = xs.size() / 2, n = ys.size() / 2;
    if (m == 0 || n == 0) throw std::invalid_argument("rbf_mmd: empty point set");
    double gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    auto k = [gamma](double ax, double ay, double bx, double by) {
        double dx = ax - bx, dy = ay - by;
        return std::exp(-gamma * (dx * dx + dy * dy));
    };
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
            kxx += k(xs[2 * i], xs[2 * i + 1], xs[2 * j], xs[2 * j + 1]);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            kyy += k(ys[2 * i], ys[2 * i + 1], ys[2 * j], ys[2 * j + 1]);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            kxy += k(xs[2 * i], xs[2 * i + 1], ys[2 * j], ys[2 * j + 1]);
    double mm = static_cast<double>(m), nn = static_cast<double>(n);
    double mmd2 = kxx / (mm * mm) + kyy / (nn * nn) - 2.0 * kxy / (mm * nn);
    return std::sqrt(std::max(0.0, mmd2));
}

double median_pairwise_distance(const std::vector<double>& pts) {
    std::size_t n = pts.size() / 2;
    std::vector<double> d;
    d.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double dx = pts[2 * i] - pts[2 * j];
            double dy = pts[2 * i + 1] - pts[2 * j + 1];
            d.push_back(std::sqrt(dx * dx + dy * dy));
        }
    if (d.empty()) throw std::invalid_argument("median_pairwise_distance: need >= 2 points");
    std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
    return d[d.size() / 2];
}

}  // namespace tdpo::data
