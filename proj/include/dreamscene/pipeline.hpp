#pragma once

#include "dreamscene/camscene.hpp"
#include "dreamscene/fps.hpp"
#include "dreamscene/gaussian_cloud.hpp"
#include "dreamscene/guidance.hpp"
#include "dreamscene/optimizer.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace dreamscene {

/// splitmix64 of (seed, stream): independent generator seeds per purpose.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct RunConfig {
    int max_iter_object = 1500;
    int max_iter_env = 2000;
    int compress_iter = 500;
    double gamma = 0.6;
    int K = 20;
    int t_small = 200;
    int recon_steps = 200;
    /// Cap on stage-3 reconstruction views (0 = use every union pose).
    int stage3_view_cap = 0;
    std::array<double, 3> stage_split{0.4, 0.3, 0.3};
    int densify_iter = 100;
    double densify_grad_threshold = 0.05;
    double densify_percentile = 90.0;
    std::size_t max_gaussians = 4096;
    int m0 = 4;
    int m_period = 400;
    ChainMode chain = ChainMode::ddim;
    int ddim_substeps = 10;
    AdamConfig adam;
    LearningRates recon_lr{1.6e-4, 5e-2, 1e-2, 5e-3};
    std::size_t object_init_count = 256;
    double object_radius = 0.5;
    std::size_t env_init_count = 2048;
    double init_opacity = 0.1;
    double orbit_radius_factor = 2.5;
    CameraTemplate camera;
    std::uint64_t seed = 0;
    int workers = 1;

    void validate() const;
};

nlohmann::json config_to_json(const RunConfig& config);
/// Applies the keys present in `j` on top of `base`; unknown keys are a parse error.
RunConfig config_from_json(const nlohmann::json& j, RunConfig base = {});

struct StagePlan {
    int stage = 1;
    int iterations = 0;
    bool freeze_ground = false;
    bool freeze_surroundings = false;
    /// Objects stay frozen in every stage.
    bool render_objects = false;
    std::string condition;
    SamplingConfig sampling;
};

std::array<StagePlan, 3> make_stage_plans(const SceneLayout& layout, const RunConfig& config);

/// One entry per change to the cloud's parameters, kept so runs can be
/// audited for opacity resets.
struct UpdateEvent {
    int stage = 0; ///< 0 for object generation
    int iter = 0;
    std::string kind; ///< step | densify | prune | recon
    std::size_t count = 0;
    /// Largest |change| of a surviving Gaussian's opacity logit.
    double max_opacity_change = 0.0;
};

struct StageReport {
    int stage = 0;
    int iterations = 0;
    std::size_t poses = 0;
    std::vector<double> residual_rms;
    std::vector<nlohmann::json> filters;
    std::size_t densified = 0;
    std::size_t gaussians_end = 0;
};

struct RunReport {
    std::vector<StageReport> stages;
    std::vector<UpdateEvent> updates;
    double recon_initial_loss = 0.0;
    double recon_final_loss = 0.0;
    std::size_t recon_views = 0;
    bool recon_view_cap_applied = false;
    double seconds = 0.0;
    nlohmann::json to_json() const;
};

/// Evaluation views shared by filtering and reconstruction.
std::vector<Camera> object_views(const RunConfig& config, std::uint64_t seed);

struct ObjectResult {
    GaussianCloud cloud;
    GaussianCloud coarse; ///< state right before reconstructive generation
    std::vector<Camera> views;
    RunReport report;
};

ObjectResult generate_object(const GuidanceModel& model, const std::string& condition, const RunConfig& config);

/// Continues optimization from a coarse checkpoint for `iterations` MTS
/// steps under `condition`, then reconstructs.
ObjectResult refine_object(const GaussianCloud& coarse, const GuidanceModel& model, const std::string& condition,
                           const RunConfig& config, int iterations);

struct Scene {
    SceneLayout layout;
    /// Environment Gaussians (ground and surroundings groups).
    GaussianCloud environment;
    GaussianCloud environment_coarse;
    /// Object clouds in their own frame, keyed by id.
    std::map<std::string, GaussianCloud> objects;
    std::uint64_t seed = 0;

    /// Environment followed by every placed, frozen object in layout order.
    MergedCloud assemble() const;
    /// Placed object rows, frozen and tagged.
    GaussianCloud placed_objects() const;
};

struct SceneResult {
    Scene scene;
    RunReport report;
    std::vector<Camera> stage1_poses;
    std::vector<Camera> stage2_poses;
};

/// Hooks observed between iterations (used by audits and tests).
struct SceneHooks {
    std::function<void(int stage, int iter, const GaussianCloud& environment)> after_step;
};

SceneResult generate_scene(const SceneLayout& layout, const std::map<std::string, GaussianCloud>& objects,
                           const GuidanceModel& model, const RunConfig& config, const SceneHooks& hooks = {});

/// FNV-1a over the raw bytes of the listed rows' parameters.
std::uint64_t parameter_hash(const GaussianCloud& cloud, std::size_t begin, std::size_t end);

struct MoveOp {
    std::string object_id;
    double scale = 1.0;
    double yaw_deg = 0.0;
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};
struct AddOp {
    ObjectSpec spec;
    GaussianCloud cloud;
};
struct RemoveOp {
    std::string object_id;
};
using EditOp = std::variant<MoveOp, AddOp, RemoveOp>;

struct ReoptimizationPlan {
    std::vector<Camera> poses;
    int stage2_iterations = 0;
    int stage3_iterations = 0;
};

/// Applies the edit and returns the poses covering every touched region.
/// Throws NotFoundError for unknown ids and ValidationError for placements
/// that overlap other objects or leave the environment.
std::pair<Scene, ReoptimizationPlan> edit_transform(const Scene& scene, const EditOp& op, const RunConfig& config);

/// Runs the plan's stage-2 then stage-3 passes over its poses, then reconstructs.
SceneResult reoptimize(const Scene& scene, const ReoptimizationPlan& plan, const GuidanceModel& model,
                       const RunConfig& config);

/// Restyles an object from its coarse checkpoint.
ObjectResult edit_restyle(const GaussianCloud& coarse, const GuidanceModel& model, const std::string& new_condition,
                          const RunConfig& config, int iterations);

/// Scene directory: scene.ply, scene_coarse.ply, scene.json, environment.ply,
/// environment_coarse.ply and objects/<id>.ply.
void save_scene(const Scene& scene, const std::filesystem::path& dir);
Scene load_scene(const std::filesystem::path& dir);

/// Mean over pixels with alpha >= 0.5 of the L2 distance between the
/// un-premultiplied render color and `target`. Infinity when no pixel qualifies.
double foreground_color_error(const RenderOutput& rendered, const Eigen::Vector3d& background,
                              const Eigen::Vector3d& target);

} // namespace dreamscene
