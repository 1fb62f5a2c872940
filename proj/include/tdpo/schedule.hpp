#pragma once

#include <cstddef>
#include <vector>

namespace tdpo::ddpm {

/// Per-timestep diffusion coefficients for a T-step chain. Arrays are
/// indexed by the physical timestep t in [0, T]; index 0 holds the
/// conventions beta_0 = 0, alpha_0 = 1, alpha_bar_0 = 1. sigma[t] is the
/// ancestral-sampler standard deviation for the transition x_t -> x_{t-1}
/// (index 0 unused).
struct NoiseSchedule {
    std::size_t T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> sigma;
    double sigma_floor = 1e-4;
};

/// Linear beta ramp construction. sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t),
/// floored at sigma_floor so log densities stay finite at the last step.
NoiseSchedule make_schedule(std::size_t T, double beta_min, double beta_max,
                            double sigma_floor = 1e-4);

}  // namespace tdpo::ddpm
