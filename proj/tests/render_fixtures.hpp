#pragma once

#include "dreamscene/camera.hpp"
#include "dreamscene/gaussian_cloud.hpp"
#include "dreamscene/image.hpp"
#include "dreamscene/render.hpp"

#include <Eigen/Geometry>

#include <random>

namespace dreamscene::testing {

/// Small scene in front of a camera at the origin looking along +x, kept
/// away from the 3-sigma cutoff and the alpha clamp so central differences
/// stay smooth.
inline GaussianCloud random_scene(std::mt19937_64& rng, int count) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GaussianCloud cloud;
    for (int i = 0; i < count; ++i) {
        const Eigen::Vector3d mean(2.0 + 2.0 * u(rng), -0.4 + 0.8 * u(rng), -0.4 + 0.8 * u(rng));
        const Eigen::Vector3d log_scale(std::log(0.25 + 0.35 * u(rng)), std::log(0.25 + 0.35 * u(rng)),
                                        std::log(0.25 + 0.35 * u(rng)));
        Eigen::Quaterniond q(u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5, u(rng) - 0.5);
        q.normalize();
        const double opacity = 0.1 + 0.6 * u(rng);
        const Eigen::Vector3d rgb(0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng));
        cloud.push_back(mean, log_scale, q, logit(opacity), rgb);
    }
    return cloud;
}

inline Camera axis_camera(int width = 16, int height = 16) {
    Camera cam;
    cam.width = width;
    cam.height = height;
    return cam;
}

/// Scalar loss L = sum(weights * color).
inline double weighted_sum(const Image& color, const Image& weights) {
    double total = 0.0;
    for (std::size_t k = 0; k < color.data.size(); ++k) total += color.data[k] * weights.data[k];
    return total;
}

} // namespace dreamscene::testing
