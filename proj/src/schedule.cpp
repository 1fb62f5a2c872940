#include "tdpo/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace tdpo::ddpm {

NoiseSchedule make_schedule(std::size_t T, double beta_min, double beta_max,
                            double sigma_floor) {
    if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_min <= beta_max < 1");
    if (!(sigma_floor > 0.0))
        throw std::invalid_argument("make_schedule: sigma_floor must be positive");

    NoiseSchedule s;
    s.T = T;
    s.sigma_floor = sigma_floor;
    s.beta.assign(T + 1, 0.0);
    s.alpha.assign(T + 1, 1.0);
    s.alpha_bar.assign(T + 1, 1.0);
    s.sigma.assign(T + 1, 0.0);

    for (std::size_t t = 1; t <= T; ++t) {
        double frac = T == 1 ? 0.0
                             : static_cast<double>(t - 1) / static_cast<double>(T - 1);
        s.beta[t] = beta_min + (beta_max - beta_min) * frac;
        s.alpha[t] = 1.0 - s.beta[t];
        s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    }
    for (std::size_t t = 1; t <= T; ++t) {
        double var = s.beta[t] * (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]);
        s.sigma[t] = std::max(std::sqrt(var), sigma_floor);
    }
    return s;
}

}  // namespace tdpo::ddpm
