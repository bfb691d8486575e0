#pragma once

#include "dreamscene/sh.hpp"

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace dreamscene {

/// Which part of a scene a Gaussian belongs to; drives per-stage freeze masks.
enum class GaussianGroup : std::uint8_t {
    none = 0,
    object = 1,
    ground = 2,
    surroundings = 3,
};

inline constexpr double kUnitQuaternionTolerance = 1e-6;

/// Struct-of-arrays 3D Gaussian set. Scales are stored as logs, opacity as a
/// logit, color as SH coefficients laid out [gaussian][coefficient][channel].
struct GaussianCloud {
    int sh_degree = 0;
    std::vector<Eigen::Vector3d> means;
    std::vector<Eigen::Vector3d> log_scales;
    std::vector<Eigen::Quaterniond> rotations;
    std::vector<double> opacity_logits;
    std::vector<double> sh;
    std::vector<std::uint8_t> frozen;
    std::vector<GaussianGroup> groups;

    std::size_t size() const { return means.size(); }
    bool empty() const { return means.empty(); }
    int coeffs_per_gaussian() const { return sh_coefficient_count(sh_degree); }
    std::size_t sh_stride() const { return std::size_t(3) * coeffs_per_gaussian(); }

    std::span<double> sh_of(std::size_t i) { return {sh.data() + i * sh_stride(), sh_stride()}; }
    std::span<const double> sh_of(std::size_t i) const { return {sh.data() + i * sh_stride(), sh_stride()}; }

    double opacity(std::size_t i) const;
    Eigen::Vector3d dc_rgb(std::size_t i) const;
    void set_dc_rgb(std::size_t i, const Eigen::Vector3d& rgb);

    /// Appends one Gaussian with the given DC color; higher SH bands start at zero.
    void push_back(const Eigen::Vector3d& mean, const Eigen::Vector3d& log_scale, const Eigen::Quaterniond& rotation,
                   double opacity_logit, const Eigen::Vector3d& rgb, GaussianGroup group = GaussianGroup::none,
                   bool is_frozen = false);
    /// Appends row `i` of `other`, which must share this cloud's SH degree.
    void push_row(const GaussianCloud& other, std::size_t i);

    /// Rows in the given order (indices may repeat).
    GaussianCloud gather(std::span<const std::size_t> indices) const;

    /// Throws ValidationError when array lengths disagree or a quaternion is not unit.
    void validate() const;
    void normalize_rotations();
};

GaussianCloud make_empty_cloud(int sh_degree = 0);

double logistic(double x);
double logit(double p);

/// Sigma = R diag(exp(2 log_scales)) R^T. Throws ValidationError if the
/// quaternion is not unit within kUnitQuaternionTolerance.
Eigen::Matrix3d covariance_from(const Eigen::Vector3d& log_scales, const Eigen::Quaterniond& rotation);

/// exp(-x^T Sigma^-1 x / 2) for an offset x from the mean. Throws DegenerateError
/// when the covariance is numerically singular.
double density_at(const Eigen::Vector3d& log_scales, const Eigen::Quaterniond& rotation, const Eigen::Vector3d& offset);
double density_at(const GaussianCloud& cloud, std::size_t i, const Eigen::Vector3d& offset);

/// sqrt(det Sigma) = product of per-axis scales.
double volume_of(const Eigen::Vector3d& log_scales);
double volume_of(const GaussianCloud& cloud, std::size_t i);

/// Uniform scale, rotation and translation mapping object space to world space.
struct AffinePlacement {
    double scale = 1.0;
    Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    static AffinePlacement identity() { return {}; }
    static AffinePlacement from_yaw(double scale, double yaw_radians, const Eigen::Vector3d& translation);

    Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return rotation * (scale * x) + translation; }
    void validate() const;
};

/// (outer o inner)(x) = outer(inner(x)).
AffinePlacement compose(const AffinePlacement& outer, const AffinePlacement& inner);

GaussianCloud apply_placement(const GaussianCloud& cloud, const AffinePlacement& placement);

/// Half-open row ranges recording where each source landed in a merged cloud.
using RowRange = std::pair<std::size_t, std::size_t>;

struct MergedCloud {
    GaussianCloud cloud;
    std::vector<RowRange> ranges;
};

/// Concatenates clouds in order. Lower SH degrees are zero-padded to the highest.
MergedCloud merge_clouds(std::span<const GaussianCloud> clouds);
std::vector<GaussianCloud> split_cloud(const GaussianCloud& cloud, std::span<const RowRange> ranges);

/// Raises the SH degree, zero-filling new bands.
GaussianCloud promote_sh_degree(const GaussianCloud& cloud, int degree);

enum class PrimitiveKind { sphere, box, cuboid_room, hemisphere_dome };

/// Sphere and hemisphere use x as the radius; box and room use (x, y, z) as
/// full width, depth and height. Rooms occupy [-x/2,x/2] x [-y/2,y/2] x [0,z].
struct Extent {
    double x = 1.0;
    double y = 1.0;
    double z = 1.0;
};

struct PrimitiveOptions {
    Eigen::Vector3d rgb = Eigen::Vector3d::Constant(0.5);
    double opacity = 0.1;
};

/// Face/shell thickness used by the room and dome initializers.
double surface_thickness(PrimitiveKind kind, const Extent& extent);

GaussianCloud init_primitive(PrimitiveKind kind, std::size_t count, const Extent& extent, std::uint64_t seed,
                             const PrimitiveOptions& options = {});

struct DensifyOptions {
    double split_divisor = 1.6;
    /// Growth stops once the cloud reaches this many Gaussians (0 = unlimited).
    std::size_t max_count = 0;
};

struct DensifyResult {
    GaussianCloud cloud;
    /// For every output row, the input row it descends from.
    std::vector<std::size_t> source;
    std::size_t cloned = 0;
    std::size_t split = 0;
};

/// Clone/split growth. Over-threshold Gaussians whose largest scale is at or
/// below the `scale_percentile` of the cloud's largest scales are cloned in
/// place; larger ones are split into two children offset along their major
/// axis with scales divided by `split_divisor`. Opacity is never modified.
DensifyResult densify_clone_split(const GaussianCloud& cloud, std::span<const double> positional_grad_norms,
                                  double grad_threshold, double scale_percentile = 90.0,
                                  const DensifyOptions& options = {});

} // namespace dreamscene
