#pragma once

#include <cstddef>
#include <vector>

#include "tdpo/rng.hpp"
#include "tdpo/tensor.hpp"

namespace tdpo::data {

/// 2-D Gaussian mixture: equal-weight isotropic modes on a circle. Contexts
/// are the unit vectors at the mode angles, so the context space is
/// continuous and unseen angles probe generalization.
struct MixtureSpec {
    std::size_t n_modes = 8;
    double radius = 0.8;
    double mode_std = 0.1;

    std::vector<double> mode_angles() const;
    /// angles bisecting consecutive training angles
    std::vector<double> bisecting_angles() const;
};

struct Sample {
    double x[2];
    double c[2];  // unit context vector of the generating mode
};

Sample draw(const MixtureSpec& spec, Rng& rng);

/// Batched draw; row i of `points` is x, row i of `contexts` is c.
void draw_batch(const MixtureSpec& spec, std::size_t n, Rng& rng,
                ad::Tensor& points, ad::Tensor& contexts);

/// log density of the mixture component owned by context angle `psi`
/// evaluated at x (isotropic Gaussian around radius * (cos psi, sin psi)).
double component_log_density(const MixtureSpec& spec, const double x[2],
                             const double c[2]);

/// Biased (V-statistic) RBF-kernel maximum mean discrepancy between two
/// point sets; `bandwidth` is the kernel length scale.
double rbf_mmd(const std::vector<double>& xs, const std::vector<double>& ys,
               double bandwidth);

/// Median pairwise distance of a point set (bandwidth heuristic).
double median_pairwise_distance(const std::vector<double>& pts);

}  // namespace tdpo::data
