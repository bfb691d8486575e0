#pragma once

#include "dreamscene/camera.hpp"
#include "dreamscene/gaussian_cloud.hpp"
#include "dreamscene/image.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace dreamscene {

inline constexpr double kAlphaClamp = 0.99;
inline constexpr double kTransmittanceCutoff = 1e-4;
/// Squared Mahalanobis radius of the 3-sigma footprint.
inline constexpr double kFootprintPower = 9.0;
inline constexpr int kTileSize = 16;

/// A Gaussian after projection into one camera.
struct Splat2D {
    std::size_t index = 0;           ///< row in the source cloud
    Eigen::Vector2d mean;            ///< pixels
    Eigen::Matrix2d cov;             ///< pixels^2
    Eigen::Matrix2d conic;           ///< cov^-1
    double depth = 0.0;              ///< camera-frame z
    Eigen::Vector3d rgb;             ///< clamped view-dependent color
    Eigen::Vector3d rgb_unclamped;
    double alpha_peak = 0.0;         ///< activated opacity
    double radius = 0.0;             ///< 3-sigma screen radius, pixels
    Eigen::Vector3d cam_pos;         ///< camera-frame position
};

/// Culls Gaussians behind the near plane, beyond the far plane, with a
/// degenerate footprint, or whose 3-sigma disc misses the image. The result is
/// sorted front to back by (depth, index).
std::vector<Splat2D> project(const GaussianCloud& cloud, const Camera& camera);

/// True when the pixel center lies inside the 3-sigma footprint; `power`
/// receives the squared Mahalanobis distance q.
bool splat_covers(const Splat2D& splat, const Eigen::Vector2d& pixel, double& power);

struct RenderOptions {
    Eigen::Vector3d background = Eigen::Vector3d::Zero();
    /// 0 = one worker per logical processor.
    int workers = 1;
    /// Tile-binned traversal; the per-pixel reference path gives identical output.
    bool tiled = true;
    bool scale_gradients = true;
};

struct RenderOutput {
    Image color;
    Plane alpha;
    Plane depth;
};

RenderOutput render_forward(const GaussianCloud& cloud, const Camera& camera, const RenderOptions& options = {});

/// Gradients of a scalar loss with respect to the optimized parameters.
struct ParamGrads {
    std::vector<Eigen::Vector3d> means;
    std::vector<Eigen::Vector3d> log_scales;
    std::vector<double> opacity_logits;
    std::vector<Eigen::Vector3d> sh_dc;
    /// |dL/d mean2d| per Gaussian, the densification signal.
    std::vector<double> mean2d_norm;

    explicit ParamGrads(std::size_t n = 0);
    std::size_t size() const { return means.size(); }
    void zero_rows(std::span<const std::uint8_t> mask);
    ParamGrads& operator+=(const ParamGrads& other);
    ParamGrads& operator*=(double s);
    bool all_finite() const;
};

/// Exact reverse-mode gradients of the compositing equation for means,
/// opacity logits, DC color and (when enabled) log scales. Higher SH bands and
/// rotations receive no gradient. Throws ValidationError when the adjoint
/// image does not match the camera resolution.
ParamGrads render_backward(const GaussianCloud& cloud, const Camera& camera, const Image& dloss_dcolor,
                           const RenderOptions& options = {});

} // namespace dreamscene
