#pragma once

#include "dreamscene/camera.hpp"
#include "dreamscene/gaussian_cloud.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <functional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dreamscene {

enum class EnvironmentKind { indoor, outdoor };

std::string to_string(EnvironmentKind kind);

struct ObjectSpec {
    std::string id;
    std::string condition;
    double scale = 1.0;
    double yaw_deg = 0.0;
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
    /// World-space radius of the placed object's bounding sphere, centered on the translation.
    double bounding_radius = 0.5;

    AffinePlacement placement() const;
};

/// Indoor rooms span [-w/2, w/2] x [-d/2, d/2] x [0, h]; outdoor scenes are a
/// hemisphere of the given radius centered at the origin.
struct SceneLayout {
    EnvironmentKind kind = EnvironmentKind::outdoor;
    Extent room{6.0, 6.0, 3.0};
    double radius = 10.0;
    /// Conditions for the surroundings and for the ground.
    std::string condition = "environment";
    std::string ground_condition = "ground";
    std::vector<ObjectSpec> objects;

    /// Throws ValidationError for duplicate ids, bad extents or objects that
    /// leave the environment.
    void validate() const;
    const ObjectSpec& object(const std::string& id) const;
};

SceneLayout layout_from_json(const nlohmann::json& j);
nlohmann::json layout_to_json(const SceneLayout& layout);
SceneLayout load_layout(const std::filesystem::path& path);

struct Region {
    enum class Kind { focal, residual, ring };
    Kind kind = Kind::residual;
    std::string object_id; ///< focal regions only
    Eigen::Vector2d centroid = Eigen::Vector2d::Zero();
    double area = 0.0;
    /// Ring regions: inner and outer radius.
    double inner_radius = 0.0;
    double outer_radius = 0.0;
    std::function<bool(const Eigen::Vector2d&)> contains;
};

struct PartitionOptions {
    int rings = 3;
    /// Target edge length of the residual grid cells.
    double cell_size = 2.0;
    /// Focal disk radius as a multiple of the object's bounding radius.
    double focal_radius_factor = 2.0;
};

/// Indoor: one focal region per object (disk of focal_radius_factor times its
/// bounding radius, clipped to the room and to its Voronoi cell among
/// objects) plus the non-empty remainders of a regular grid. Outdoor: rings
/// with outer radii k R / C.
std::vector<Region> partition_regions(const SceneLayout& layout, const PartitionOptions& options = {});

struct CameraTemplate {
    double vertical_fov_deg = 60.0;
    int width = 64;
    int height = 64;
    double near = 0.05;
    double far = 100.0;
};

struct SamplingConfig {
    int stage = 1;
    double pitch_min_deg = 80.0;
    double pitch_max_deg = 110.0;
    int group_size = 4;
    std::vector<double> radius_fractions{0.25, 0.5};
    double late_phase_fraction = 0.7;
    double collision_margin = 0.1;
    double wall_margin = 0.2;
    int max_retries = 64;
    double outdoor_height = 1.6;
    double focal_probability = 0.5;
    PartitionOptions partition;
    CameraTemplate camera;

    void validate() const;
};

/// Default pitch window per environment and stage (stages 1 and 2).
SamplingConfig default_sampling(EnvironmentKind kind, int stage);

/// True when the position is inside an inflated object sphere or outside the
/// environment's usable volume.
bool collision_check(const Camera& camera, const SceneLayout& layout, double margin = 0.1,
                     double wall_margin = 0.2);

/// Poses for one iteration at the given fraction of the stage's budget.
/// Throws StarvationError when a pose slot exhausts its retries.
std::vector<Camera> sample_cameras(const SceneLayout& layout, const SamplingConfig& config, double progress,
                                   std::mt19937_64& rng);

/// Equal when positions agree within 1e-6 and yaw/pitch within 0.01 degrees.
bool same_pose(const Camera& a, const Camera& b);

/// Order-preserving deduplicated union.
std::vector<Camera> stage3_union(std::span<const Camera> first, std::span<const Camera> second);

/// Camera on a sphere around `center` looking at it.
Camera orbit_camera(const Eigen::Vector3d& center, double radius, double azimuth, double elevation,
                    const CameraTemplate& tmpl);

Camera make_camera(const Eigen::Vector3d& position, double yaw, double pitch, const CameraTemplate& tmpl);

/// CSV rows stage,x,y,z,yaw_deg,pitch_deg.
void write_pose_csv(std::span<const Camera> cameras, std::span<const int> stages, std::ostream& out);

} // namespace dreamscene
