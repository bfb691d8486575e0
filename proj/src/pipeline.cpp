#include "dreamscene/pipeline.hpp"

#include "dreamscene/error.hpp"
#include "dreamscene/ply.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

namespace dreamscene {

namespace {

constexpr double kPi = std::numbers::pi;

// Generator streams.
enum Stream : std::uint64_t {
    kInitStream = 1,
    kViewStream,
    kCameraStream,
    kPlanStream,
    kNoiseStream,
    kReconStream,
    kEnvInitStream = 11,
    kEnvCameraStream,
    kEnvPlanStream,
    kEnvNoiseStream,
    kEnvReconStream,
    kReoptStream = 21,
};

ParamGrads head_rows(const ParamGrads& g, std::size_t n) {
    ParamGrads out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.means[i] = g.means[i];
        out.log_scales[i] = g.log_scales[i];
        out.opacity_logits[i] = g.opacity_logits[i];
        out.sh_dc[i] = g.sh_dc[i];
        out.mean2d_norm[i] = g.mean2d_norm[i];
    }
    return out;
}

double rms(const Image& img) { return img.data.empty() ? 0.0 : std::sqrt(squared_norm(img) / double(img.data.size())); }

double max_opacity_change(const GaussianCloud& before, const GaussianCloud& after,
                          std::span<const std::size_t> source) {
    double worst = 0.0;
    for (std::size_t i = 0; i < after.size(); ++i) {
        worst = std::max(worst, std::abs(after.opacity_logits[i] - before.opacity_logits[source[i]]));
    }
    return worst;
}

std::vector<std::size_t> identity_rows(std::size_t n) {
    std::vector<std::size_t> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = i;
    return rows;
}

/// Optimizer, densification and pruning bookkeeping shared by every loop.
class Trainer {
public:
    Trainer(const RunConfig& config, RunReport& report, int stage)
        : config_(config), report_(report), adam_(config.adam), stage_(stage) {}

    void set_stage(int stage) { stage_ = stage; }
    Adam& adam() { return adam_; }

    void step(GaussianCloud& cloud, ParamGrads grads, int iter) {
        grads.zero_rows(cloud.frozen);
        if (accum_.size() != cloud.size()) accum_.assign(cloud.size(), 0.0);
        for (std::size_t i = 0; i < cloud.size(); ++i) accum_[i] += grads.mean2d_norm[i];
        ++accum_steps_;
        const GaussianCloud before = cloud;
        adam_.step(cloud, grads);
        const auto rows = identity_rows(cloud.size());
        report_.updates.push_back({stage_, iter, "step", cloud.size(), max_opacity_change(before, cloud, rows)});
    }

    std::size_t densify(GaussianCloud& cloud, int iter) {
        if (accum_steps_ == 0 || accum_.size() != cloud.size()) return 0;
        std::vector<double> mean_norm(cloud.size());
        for (std::size_t i = 0; i < cloud.size(); ++i) mean_norm[i] = accum_[i] / accum_steps_;
        DensifyOptions opts;
        opts.max_count = config_.max_gaussians;
        DensifyResult res = densify_clone_split(cloud, mean_norm, config_.densify_grad_threshold,
                                                config_.densify_percentile, opts);
        const std::size_t grown = res.cloned + res.split;
        report_.updates.push_back({stage_, iter, "densify", grown, max_opacity_change(cloud, res.cloud, res.source)});
        adam_.remap(res.source);
        cloud = std::move(res.cloud);
        reset_accumulators();
        return grown;
    }

    nlohmann::json prune(GaussianCloud& cloud, std::span<const Camera> cameras, int iter) {
        const std::vector<double> scores = filter_scores(cloud, cameras, config_.workers);
        auto [kept, report] = filter_prune(cloud, scores, config_.gamma, cloud.frozen);
        report_.updates.push_back(
            {stage_, iter, "prune", report.removed_count, max_opacity_change(cloud, kept, report.kept_indices)});
        adam_.remap(report.kept_indices);
        nlohmann::json entry{{"iter", iter},
                             {"before", cloud.size()},
                             {"removed", report.removed_count},
                             {"compression_ratio", report.compression_ratio}};
        cloud = std::move(kept);
        reset_accumulators();
        return entry;
    }

    void reset_accumulators() {
        accum_.clear();
        accum_steps_ = 0;
    }

private:
    const RunConfig& config_;
    RunReport& report_;
    Adam adam_;
    int stage_;
    std::vector<double> accum_;
    int accum_steps_ = 0;
};

MtsOptions mts_options(const RunConfig& config) {
    MtsOptions opts;
    opts.chain = config.chain;
    opts.ddim.substeps = config.ddim_substeps;
    opts.render.workers = config.workers;
    return opts;
}

ReconstructionOptions recon_options(const RunConfig& config) {
    ReconstructionOptions opts;
    opts.t_small = config.t_small;
    opts.steps = config.recon_steps;
    opts.adam = config.adam;
    opts.adam.lr = config.recon_lr;
    opts.render.workers = config.workers;
    return opts;
}

/// Average MTS gradient over the poses of one iteration.
ParamGrads pose_gradients(const GaussianCloud& render_cloud, std::size_t trainable_rows,
                          std::span<const Camera> cameras, const GuidanceModel& model, const std::string& condition,
                          const TimestepPlan& plan, Rng& noise_rng, const MtsOptions& opts, double& residual_rms) {
    ParamGrads total(render_cloud.size());
    residual_rms = 0.0;
    for (const Camera& cam : cameras) {
        MtsResult res = mts_gradient(render_cloud, cam, model, condition, plan, noise_rng, opts);
        total += res.grads;
        residual_rms += rms(res.residual);
    }
    const double inv = 1.0 / double(cameras.size());
    total *= inv;
    residual_rms *= inv;
    return head_rows(total, trainable_rows);
}

void finish_report(RunReport& report, const ReconstructionResult& recon, std::size_t views, bool capped,
                   std::chrono::steady_clock::time_point start) {
    report.recon_initial_loss = recon.initial_loss;
    report.recon_final_loss = recon.final_loss;
    report.recon_views = views;
    report.recon_view_cap_applied = capped;
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void set_stage_freeze(GaussianCloud& env, bool freeze_ground, bool freeze_surroundings) {
    for (std::size_t i = 0; i < env.size(); ++i) {
        const bool ground = env.groups[i] == GaussianGroup::ground;
        env.frozen[i] = ground ? freeze_ground : freeze_surroundings;
    }
}

} // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

void RunConfig::validate() const {
    if (max_iter_object < 0 || max_iter_env < 0) throw ValidationError("iteration budgets must be >= 0");
    if (compress_iter < 1) throw ValidationError("compress_iter must be >= 1");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ValidationError("gamma must be in [0, 1)");
    if (K < 1) throw ValidationError("K must be >= 1");
    if (t_small < 1 || t_small > 200) throw ValidationError("t_small must be in [1, 200]");
    if (recon_steps < 0) throw ValidationError("recon_steps must be >= 0");
    double sum = 0.0;
    for (double f : stage_split) {
        if (!(f >= 0.0)) throw ValidationError("stage fractions must be >= 0");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("stage fractions must sum to 1");
    if (densify_iter < 0) throw ValidationError("densify_iter must be >= 0");
    if (m0 < 1 || m_period < 1) throw ValidationError("m schedule parameters must be >= 1");
    if (ddim_substeps < 1) throw ValidationError("ddim_substeps must be >= 1");
    if (object_init_count < 1 || env_init_count < 1) throw ValidationError("init counts must be positive");
    if (!(object_radius > 0.0)) throw ValidationError("object_radius must be positive");
    if (!(init_opacity > 0.0 && init_opacity < 1.0)) throw ValidationError("init_opacity must be in (0, 1)");
    if (camera.width < 1 || camera.height < 1) throw ValidationError("camera resolution must be positive");
    if (workers < 0) throw ValidationError("workers must be >= 0");
}

nlohmann::json config_to_json(const RunConfig& c) {
    return {
        {"max_iter_object", c.max_iter_object},
        {"max_iter_env", c.max_iter_env},
        {"compress_iter", c.compress_iter},
        {"gamma", c.gamma},
        {"K", c.K},
        {"t_small", c.t_small},
        {"recon_steps", c.recon_steps},
        {"stage3_view_cap", c.stage3_view_cap},
        {"stage_split", c.stage_split},
        {"densify_iter", c.densify_iter},
        {"densify_grad_threshold", c.densify_grad_threshold},
        {"densify_percentile", c.densify_percentile},
        {"max_gaussians", c.max_gaussians},
        {"m0", c.m0},
        {"m_period", c.m_period},
        {"chain", c.chain == ChainMode::ddim ? "ddim" : "independent"},
        {"ddim_substeps", c.ddim_substeps},
        {"lr", {{"means", c.adam.lr.means}, {"opacity", c.adam.lr.opacity}, {"color", c.adam.lr.color},
                {"scales", c.adam.lr.scales}}},
        {"recon_lr", {{"means", c.recon_lr.means}, {"opacity", c.recon_lr.opacity}, {"color", c.recon_lr.color},
                      {"scales", c.recon_lr.scales}}},
        {"object_init_count", c.object_init_count},
        {"object_radius", c.object_radius},
        {"env_init_count", c.env_init_count},
        {"init_opacity", c.init_opacity},
        {"orbit_radius_factor", c.orbit_radius_factor},
        {"camera", {{"vertical_fov_deg", c.camera.vertical_fov_deg}, {"width", c.camera.width},
                    {"height", c.camera.height}, {"near", c.camera.near}, {"far", c.camera.far}}},
        {"seed", c.seed},
        {"workers", c.workers},
    };
}

namespace {

template <typename T>
T typed(const nlohmann::json& v, const std::string& key) {
    try {
        if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ParseError("config: '" + key + "' must be a string");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ParseError("config: '" + key + "' must be an integer");
            if (std::is_unsigned_v<T> && v.get<long long>() < 0 && !v.is_number_unsigned()) {
                throw ParseError("config: '" + key + "' must be non-negative");
            }
        } else {
            if (!v.is_number()) throw ParseError("config: '" + key + "' must be a number");
        }
        return v.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("config: '" + key + "': " + e.what());
    }
}

void read_rates(const nlohmann::json& j, LearningRates& lr, const std::string& key) {
    if (!j.is_object()) throw ParseError("config: '" + key + "' must be an object");
    for (const auto& [k, v] : j.items()) {
        if (k == "means") lr.means = typed<double>(v, key + ".means");
        else if (k == "opacity") lr.opacity = typed<double>(v, key + ".opacity");
        else if (k == "color") lr.color = typed<double>(v, key + ".color");
        else if (k == "scales") lr.scales = typed<double>(v, key + ".scales");
        else throw ParseError("config: unknown key '" + key + "." + k + "'");
    }
}

} // namespace

RunConfig config_from_json(const nlohmann::json& j, RunConfig c) {
    if (!j.is_object()) throw ParseError("config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        if (key == "max_iter_object") c.max_iter_object = typed<int>(v, key);
        else if (key == "max_iter_env") c.max_iter_env = typed<int>(v, key);
        else if (key == "compress_iter") c.compress_iter = typed<int>(v, key);
        else if (key == "gamma") c.gamma = typed<double>(v, key);
        else if (key == "K") c.K = typed<int>(v, key);
        else if (key == "t_small") c.t_small = typed<int>(v, key);
        else if (key == "recon_steps") c.recon_steps = typed<int>(v, key);
        else if (key == "stage3_view_cap") c.stage3_view_cap = typed<int>(v, key);
        else if (key == "stage_split") {
            if (!v.is_array() || v.size() != 3) throw ParseError("config: 'stage_split' must be 3 numbers");
            for (int k = 0; k < 3; ++k) c.stage_split[k] = typed<double>(v[k], key);
        } else if (key == "densify_iter") c.densify_iter = typed<int>(v, key);
        else if (key == "densify_grad_threshold") c.densify_grad_threshold = typed<double>(v, key);
        else if (key == "densify_percentile") c.densify_percentile = typed<double>(v, key);
        else if (key == "max_gaussians") c.max_gaussians = typed<std::size_t>(v, key);
        else if (key == "m0") c.m0 = typed<int>(v, key);
        else if (key == "m_period") c.m_period = typed<int>(v, key);
        else if (key == "chain") {
            const auto name = typed<std::string>(v, key);
            if (name == "ddim") c.chain = ChainMode::ddim;
            else if (name == "independent") c.chain = ChainMode::independent;
            else throw ParseError("config: chain must be 'ddim' or 'independent'");
        } else if (key == "ddim_substeps") c.ddim_substeps = typed<int>(v, key);
        else if (key == "lr") read_rates(v, c.adam.lr, key);
        else if (key == "recon_lr") read_rates(v, c.recon_lr, key);
        else if (key == "object_init_count") c.object_init_count = typed<std::size_t>(v, key);
        else if (key == "object_radius") c.object_radius = typed<double>(v, key);
        else if (key == "env_init_count") c.env_init_count = typed<std::size_t>(v, key);
        else if (key == "init_opacity") c.init_opacity = typed<double>(v, key);
        else if (key == "orbit_radius_factor") c.orbit_radius_factor = typed<double>(v, key);
        else if (key == "camera") {
            if (!v.is_object()) throw ParseError("config: 'camera' must be an object");
            for (const auto& [k, cv] : v.items()) {
                if (k == "vertical_fov_deg") c.camera.vertical_fov_deg = typed<double>(cv, "camera." + k);
                else if (k == "width") c.camera.width = typed<int>(cv, "camera." + k);
                else if (k == "height") c.camera.height = typed<int>(cv, "camera." + k);
                else if (k == "near") c.camera.near = typed<double>(cv, "camera." + k);
                else if (k == "far") c.camera.far = typed<double>(cv, "camera." + k);
                else throw ParseError("config: unknown key 'camera." + k + "'");
            }
        } else if (key == "seed") c.seed = typed<std::uint64_t>(v, key);
        else if (key == "workers") c.workers = typed<int>(v, key);
        else throw ParseError("config: unknown key '" + key + "'");
    }
    return c;
}

std::array<StagePlan, 3> make_stage_plans(const SceneLayout& layout, const RunConfig& config) {
    const bool indoor = layout.kind == EnvironmentKind::indoor;
    const int total = config.max_iter_env;
    const int s1 = int(std::lround(config.stage_split[0] * total));
    const int s2 = std::min(total - s1, int(std::lround(config.stage_split[1] * total)));
    std::array<StagePlan, 3> plans;
    plans[0] = {1, s1, true, false, indoor, layout.condition, default_sampling(layout.kind, 1)};
    plans[1] = {2, s2, false, true, indoor, layout.ground_condition, default_sampling(layout.kind, 2)};
    plans[2] = {3, total - s1 - s2, false, false, true, layout.condition, default_sampling(layout.kind, 2)};
    for (auto& p : plans) p.sampling.camera = config.camera;
    return plans;
}

nlohmann::json RunReport::to_json() const {
    nlohmann::json stages_json = nlohmann::json::array();
    for (const auto& s : stages) {
        stages_json.push_back({{"stage", s.stage},
                               {"iterations", s.iterations},
                               {"poses", s.poses},
                               {"residual_rms", s.residual_rms},
                               {"filters", s.filters},
                               {"densified", s.densified},
                               {"gaussians_end", s.gaussians_end}});
    }
    nlohmann::json updates_json = nlohmann::json::array();
    for (const auto& u : updates) {
        updates_json.push_back({{"stage", u.stage},
                                {"iter", u.iter},
                                {"kind", u.kind},
                                {"count", u.count},
                                {"max_opacity_change", u.max_opacity_change}});
    }
    return {{"stages", stages_json},
            {"updates", updates_json},
            {"reconstruction",
             {{"initial_loss", recon_initial_loss},
              {"final_loss", recon_final_loss},
              {"views", recon_views},
              {"view_cap_applied", recon_view_cap_applied}}},
            {"seconds", seconds}};
}

std::vector<Camera> object_views(const RunConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> az(0.0, 2.0 * kPi), el(radians(-30.0), radians(45.0));
    std::vector<Camera> views;
    const double radius = config.orbit_radius_factor * config.object_radius;
    for (int k = 0; k < config.K; ++k) {
        const double a = az(rng), e = el(rng);
        views.push_back(orbit_camera(Eigen::Vector3d::Zero(), radius, a, e, config.camera));
    }
    return views;
}

namespace {

ObjectResult optimize_object(GaussianCloud cloud, const GuidanceModel& model, const std::string& condition,
                             const RunConfig& config, int iterations) {
    const auto start = std::chrono::steady_clock::now();
    ObjectResult result;
    result.views = object_views(config, derive_seed(config.seed, kViewStream));
    Rng cam_rng(derive_seed(config.seed, kCameraStream));
    Rng plan_rng(derive_seed(config.seed, kPlanStream));
    Rng noise_rng(derive_seed(config.seed, kNoiseStream));
    Rng recon_rng(derive_seed(config.seed, kReconStream));
    std::uniform_real_distribution<double> az(0.0, 2.0 * kPi), el(radians(-30.0), radians(45.0));
    const double radius = config.orbit_radius_factor * config.object_radius;
    const MtsOptions opts = mts_options(config);
    Trainer trainer(config, result.report, 0);
    StageReport stage;
    stage.iterations = iterations;
    stage.poses = std::size_t(iterations);

    for (int iter = 0; iter < iterations; ++iter) {
        const double a = az(cam_rng), e = el(cam_rng);
        const Camera cam = orbit_camera(Eigen::Vector3d::Zero(), radius, a, e, config.camera);
        const TimestepPlan plan = plan_timesteps(iter, iterations, model.schedule().T,
                                                 m_schedule(iter, config.m0, config.m_period), plan_rng);
        const std::array<Camera, 1> cams{cam};
        double residual = 0.0;
        ParamGrads grads = pose_gradients(cloud, cloud.size(), cams, model, condition, plan, noise_rng, opts, residual);
        if (!std::isfinite(residual)) throw NumericError("non-finite residual at object iteration " + std::to_string(iter));
        stage.residual_rms.push_back(residual);
        trainer.step(cloud, std::move(grads), iter);
        if (config.densify_iter > 0 && (iter + 1) % config.densify_iter == 0) {
            stage.densified += trainer.densify(cloud, iter);
        }
        if (iter > 0 && iter % config.compress_iter == 0) {
            stage.filters.push_back(trainer.prune(cloud, result.views, iter));
        }
    }
    stage.gaussians_end = cloud.size();
    result.report.stages.push_back(stage);
    result.coarse = cloud;

    ReconstructionResult recon =
        reconstructive_generation(cloud, result.views, model, condition, recon_rng, recon_options(config));
    result.report.updates.push_back({0, iterations, "recon", recon.cloud.size(),
                                     max_opacity_change(cloud, recon.cloud, identity_rows(cloud.size()))});
    result.cloud = std::move(recon.cloud);
    finish_report(result.report, recon, result.views.size(), false, start);
    return result;
}

} // namespace

ObjectResult generate_object(const GuidanceModel& model, const std::string& condition, const RunConfig& config) {
    config.validate();
    PrimitiveOptions init;
    init.opacity = config.init_opacity;
    GaussianCloud cloud = init_primitive(PrimitiveKind::sphere, config.object_init_count, Extent{config.object_radius},
                                         derive_seed(config.seed, kInitStream), init);
    return optimize_object(std::move(cloud), model, condition, config, config.max_iter_object);
}

ObjectResult refine_object(const GaussianCloud& coarse, const GuidanceModel& model, const std::string& condition,
                           const RunConfig& config, int iterations) {
    config.validate();
    if (iterations < 0) throw ValidationError("iterations must be >= 0");
    coarse.validate();
    return optimize_object(coarse, model, condition, config, iterations);
}

ObjectResult edit_restyle(const GaussianCloud& coarse, const GuidanceModel& model, const std::string& new_condition,
                          const RunConfig& config, int iterations) {
    if (coarse.empty()) throw ValidationError("restyle needs a non-empty coarse checkpoint");
    return refine_object(coarse, model, new_condition, config, iterations);
}

GaussianCloud Scene::placed_objects() const {
    std::vector<GaussianCloud> placed;
    for (const auto& spec : layout.objects) {
        const auto it = objects.find(spec.id);
        if (it == objects.end()) throw NotFoundError("no cloud for object '" + spec.id + "'");
        GaussianCloud c = apply_placement(it->second, spec.placement());
        std::fill(c.frozen.begin(), c.frozen.end(), std::uint8_t(1));
        std::fill(c.groups.begin(), c.groups.end(), GaussianGroup::object);
        placed.push_back(std::move(c));
    }
    if (placed.empty()) return make_empty_cloud(environment.sh_degree);
    return merge_clouds(placed).cloud;
}

MergedCloud Scene::assemble() const {
    std::vector<GaussianCloud> parts{environment};
    for (const auto& spec : layout.objects) {
        const auto it = objects.find(spec.id);
        if (it == objects.end()) throw NotFoundError("no cloud for object '" + spec.id + "'");
        GaussianCloud c = apply_placement(it->second, spec.placement());
        std::fill(c.frozen.begin(), c.frozen.end(), std::uint8_t(1));
        std::fill(c.groups.begin(), c.groups.end(), GaussianGroup::object);
        parts.push_back(std::move(c));
    }
    return merge_clouds(parts);
}

namespace {

struct EnvRun {
    const GuidanceModel& model;
    const RunConfig& config;
    Rng plan_rng;
    Rng noise_rng;
    RunReport& report;
    Trainer trainer;
    int global_iter = 0;
    int total_iters = 1;

    EnvRun(const GuidanceModel& m, const RunConfig& c, std::uint64_t plan_seed, std::uint64_t noise_seed,
           RunReport& r, int total)
        : model(m), config(c), plan_rng(plan_seed), noise_rng(noise_seed), report(r), trainer(c, r, 1),
          total_iters(std::max(1, total)) {}

    /// One stage: `poses_for(it)` supplies the cameras of iteration `it`.
    StageReport run(GaussianCloud& env, const GaussianCloud& placed, const StagePlan& plan,
                    const std::function<std::vector<Camera>(int)>& poses_for, std::vector<Camera>& pose_log,
                    const SceneHooks& hooks) {
        trainer.set_stage(plan.stage);
        trainer.reset_accumulators();
        set_stage_freeze(env, plan.freeze_ground, plan.freeze_surroundings);
        StageReport stage;
        stage.stage = plan.stage;
        stage.iterations = plan.iterations;
        const MtsOptions opts = mts_options(config);
        for (int it = 0; it < plan.iterations; ++it) {
            const std::vector<Camera> cams = poses_for(it);
            pose_log.insert(pose_log.end(), cams.begin(), cams.end());
            stage.poses += cams.size();
            const int m = m_schedule(global_iter, config.m0, config.m_period);
            const TimestepPlan tplan =
                plan_timesteps(std::min(global_iter, total_iters), total_iters, model.schedule().T, m, plan_rng);
            double residual = 0.0;
            ParamGrads grads;
            if (plan.render_objects && !placed.empty()) {
                const std::array<GaussianCloud, 2> parts{env, placed};
                const GaussianCloud merged = merge_clouds(parts).cloud;
                grads = pose_gradients(merged, env.size(), cams, model, plan.condition, tplan, noise_rng, opts, residual);
            } else {
                grads = pose_gradients(env, env.size(), cams, model, plan.condition, tplan, noise_rng, opts, residual);
            }
            if (!std::isfinite(residual)) {
                throw NumericError("non-finite residual at stage " + std::to_string(plan.stage) + " iteration " +
                                   std::to_string(it));
            }
            stage.residual_rms.push_back(residual);
            trainer.step(env, std::move(grads), global_iter);
            if (hooks.after_step) hooks.after_step(plan.stage, it, env);
            if (plan.stage < 3 && config.densify_iter > 0 && (it + 1) % config.densify_iter == 0) {
                stage.densified += trainer.densify(env, global_iter);
            }
            if (global_iter > 0 && global_iter % config.compress_iter == 0) {
                const std::size_t keep = std::min<std::size_t>(pose_log.size(), 16);
                const std::span<const Camera> recent(pose_log.data() + pose_log.size() - keep, keep);
                stage.filters.push_back(trainer.prune(env, recent, global_iter));
            }
            ++global_iter;
        }
        stage.gaussians_end = env.size();
        return stage;
    }
};

/// Reconstruction over the assembled scene; objects stay frozen.
ReconstructionResult reconstruct_scene(GaussianCloud& env, const GaussianCloud& placed,
                                       std::span<const Camera> views, const GuidanceModel& model,
                                       const std::string& condition, const RunConfig& config, Rng& rng) {
    set_stage_freeze(env, false, false);
    const std::array<GaussianCloud, 2> parts{env, placed};
    const GaussianCloud merged = placed.empty() ? env : merge_clouds(parts).cloud;
    ReconstructionResult recon = reconstructive_generation(merged, views, model, condition, rng, recon_options(config));
    std::vector<std::size_t> rows = identity_rows(env.size());
    env = recon.cloud.gather(rows);
    return recon;
}

} // namespace

SceneResult generate_scene(const SceneLayout& layout, const std::map<std::string, GaussianCloud>& objects,
                           const GuidanceModel& model, const RunConfig& config, const SceneHooks& hooks) {
    const auto start = std::chrono::steady_clock::now();
    layout.validate();
    config.validate();
    SceneResult result;
    Scene& scene = result.scene;
    scene.layout = layout;
    scene.seed = config.seed;
    for (const auto& spec : layout.objects) {
        const auto it = objects.find(spec.id);
        if (it == objects.end()) throw NotFoundError("no cloud for object '" + spec.id + "'");
        scene.objects[spec.id] = it->second;
    }
    PrimitiveOptions init;
    init.opacity = config.init_opacity;
    const bool indoor = layout.kind == EnvironmentKind::indoor;
    scene.environment = init_primitive(indoor ? PrimitiveKind::cuboid_room : PrimitiveKind::hemisphere_dome,
                                       config.env_init_count, indoor ? layout.room : Extent{layout.radius},
                                       derive_seed(config.seed, kEnvInitStream), init);
    const GaussianCloud placed = scene.placed_objects();

    const auto plans = make_stage_plans(layout, config);
    Rng cam_rng(derive_seed(config.seed, kEnvCameraStream));
    Rng recon_rng(derive_seed(config.seed, kEnvReconStream));
    EnvRun run(model, config, derive_seed(config.seed, kEnvPlanStream), derive_seed(config.seed, kEnvNoiseStream),
               result.report, config.max_iter_env);

    for (int s = 0; s < 2; ++s) {
        const StagePlan& plan = plans[s];
        auto& log = s == 0 ? result.stage1_poses : result.stage2_poses;
        result.report.stages.push_back(run.run(
            scene.environment, placed, plan,
            [&](int it) {
                return sample_cameras(layout, plan.sampling, double(it) / std::max(1, plan.iterations), cam_rng);
            },
            log, hooks));
    }
    const std::vector<Camera> all_poses = stage3_union(result.stage1_poses, result.stage2_poses);
    std::vector<Camera> stage3_log;
    result.report.stages.push_back(run.run(
        scene.environment, placed, plans[2],
        [&](int it) {
            if (all_poses.empty()) throw ValidationError("stage 3 needs poses from earlier stages");
            return std::vector<Camera>{all_poses[std::size_t(it) % all_poses.size()]};
        },
        stage3_log, hooks));

    scene.environment_coarse = scene.environment;
    std::vector<Camera> views = all_poses;
    bool capped = false;
    if (views.empty()) {
        // Zero-length earlier stages: fall back to one stage-1 style draw.
        views = sample_cameras(layout, plans[0].sampling, 0.0, cam_rng);
    }
    if (config.stage3_view_cap > 0 && int(views.size()) > config.stage3_view_cap) {
        views.resize(std::size_t(config.stage3_view_cap));
        capped = true;
    }
    const ReconstructionResult recon =
        reconstruct_scene(scene.environment, placed, views, model, layout.condition, config, recon_rng);
    result.report.updates.push_back({3, run.global_iter, "recon", scene.environment.size(), 0.0});
    set_stage_freeze(scene.environment, false, false);
    set_stage_freeze(scene.environment_coarse, false, false);
    finish_report(result.report, recon, views.size(), capped, start);
    return result;
}

std::uint64_t parameter_hash(const GaussianCloud& cloud, std::size_t begin, std::size_t end) {
    if (begin > end || end > cloud.size()) throw ValidationError("parameter_hash: row range out of bounds");
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, std::size_t bytes) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t k = 0; k < bytes; ++k) {
            h ^= p[k];
            h *= 0x100000001b3ULL;
        }
    };
    for (std::size_t i = begin; i < end; ++i) {
        mix(cloud.means[i].data(), sizeof(double) * 3);
        mix(cloud.log_scales[i].data(), sizeof(double) * 3);
        mix(cloud.rotations[i].coeffs().data(), sizeof(double) * 4);
        mix(&cloud.opacity_logits[i], sizeof(double));
        const auto sh = cloud.sh_of(i);
        mix(sh.data(), sizeof(double) * sh.size());
    }
    return h;
}

namespace {

std::vector<Camera> ring_poses(const SceneLayout& layout, const Eigen::Vector3d& center, double bounding_radius,
                               const RunConfig& config) {
    const bool indoor = layout.kind == EnvironmentKind::indoor;
    const double height = indoor ? 0.5 * layout.room.z : 1.6;
    const double ring = 2.0 * bounding_radius + 0.2;
    const Eigen::Vector3d target(center.x(), center.y(), 0.0);
    std::vector<Camera> poses;
    for (int k = 0; k < 8; ++k) {
        const double a = 2.0 * kPi * k / 8;
        const Eigen::Vector3d pos(center.x() + ring * std::cos(a), center.y() + ring * std::sin(a), height);
        Camera cam = Camera::look_at(pos, target, radians(config.camera.vertical_fov_deg), config.camera.width,
                                     config.camera.height, config.camera.near, config.camera.far);
        if (!collision_check(cam, layout)) poses.push_back(cam);
    }
    if (poses.empty()) throw StarvationError("no collision-free re-optimization pose around the edited region");
    return poses;
}

void check_clearance(const SceneLayout& layout, const ObjectSpec& spec) {
    for (const auto& o : layout.objects) {
        if (o.id == spec.id) continue;
        if ((o.translation - spec.translation).norm() < o.bounding_radius + spec.bounding_radius) {
            throw ValidationError("placement of '" + spec.id + "' overlaps object '" + o.id + "'");
        }
    }
}

} // namespace

std::pair<Scene, ReoptimizationPlan> edit_transform(const Scene& scene, const EditOp& op, const RunConfig& config) {
    Scene next = scene;
    std::vector<Camera> poses;
    auto find = [&](const std::string& id) -> std::size_t {
        for (std::size_t k = 0; k < next.layout.objects.size(); ++k)
            if (next.layout.objects[k].id == id) return k;
        throw NotFoundError("no object with id '" + id + "'");
    };
    if (const auto* move = std::get_if<MoveOp>(&op)) {
        const std::size_t k = find(move->object_id);
        ObjectSpec& spec = next.layout.objects[k];
        const ObjectSpec old = spec;
        if (!(move->scale > 0.0)) throw ValidationError("placement scale must be positive");
        spec.bounding_radius = old.bounding_radius * move->scale / old.scale;
        spec.scale = move->scale;
        spec.yaw_deg = move->yaw_deg;
        spec.translation = move->translation;
        next.layout.validate();
        check_clearance(next.layout, spec);
        const auto before = ring_poses(next.layout, old.translation, old.bounding_radius, config);
        const auto after = ring_poses(next.layout, spec.translation, spec.bounding_radius, config);
        poses = stage3_union(before, after);
    } else if (const auto* add = std::get_if<AddOp>(&op)) {
        if (next.objects.count(add->spec.id)) throw ValidationError("object id '" + add->spec.id + "' already exists");
        add->cloud.validate();
        next.layout.objects.push_back(add->spec);
        next.layout.validate();
        check_clearance(next.layout, add->spec);
        next.objects[add->spec.id] = add->cloud;
        poses = ring_poses(next.layout, add->spec.translation, add->spec.bounding_radius, config);
    } else {
        const auto& remove = std::get<RemoveOp>(op);
        const std::size_t k = find(remove.object_id);
        const ObjectSpec old = next.layout.objects[k];
        next.layout.objects.erase(next.layout.objects.begin() + std::ptrdiff_t(k));
        next.objects.erase(old.id);
        poses = ring_poses(next.layout, old.translation, old.bounding_radius, config);
    }
    ReoptimizationPlan plan;
    plan.poses = std::move(poses);
    const int budget = int(std::lround(0.25 * config.max_iter_env));
    plan.stage2_iterations = int(std::lround(config.stage_split[1] * budget));
    plan.stage3_iterations = int(std::lround(config.stage_split[2] * budget));
    return {std::move(next), std::move(plan)};
}

SceneResult reoptimize(const Scene& scene, const ReoptimizationPlan& plan, const GuidanceModel& model,
                       const RunConfig& config) {
    const auto start = std::chrono::steady_clock::now();
    config.validate();
    scene.layout.validate();
    if (plan.poses.empty()) throw ValidationError("re-optimization plan has no poses");
    SceneResult result;
    result.scene = scene;
    const std::uint64_t seed = derive_seed(config.seed, kReoptStream);
    const GaussianCloud placed = scene.placed_objects();
    auto plans = make_stage_plans(scene.layout, config);
    plans[1].iterations = plan.stage2_iterations;
    plans[2].iterations = plan.stage3_iterations;
    EnvRun run(model, config, derive_seed(seed, kEnvPlanStream), derive_seed(seed, kEnvNoiseStream), result.report,
               plan.stage2_iterations + plan.stage3_iterations);
    auto cycle = [&](int it) { return std::vector<Camera>{plan.poses[std::size_t(it) % plan.poses.size()]}; };
    result.report.stages.push_back(run.run(result.scene.environment, placed, plans[1], cycle, result.stage2_poses, {}));
    std::vector<Camera> log3;
    result.report.stages.push_back(run.run(result.scene.environment, placed, plans[2], cycle, log3, {}));
    result.scene.environment_coarse = result.scene.environment;
    Rng recon_rng(derive_seed(seed, kEnvReconStream));
    const ReconstructionResult recon = reconstruct_scene(result.scene.environment, placed, plan.poses, model,
                                                         scene.layout.condition, config, recon_rng);
    set_stage_freeze(result.scene.environment_coarse, false, false);
    finish_report(result.report, recon, plan.poses.size(), false, start);
    return result;
}

void save_scene(const Scene& scene, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "objects", ec);
    if (ec) throw IoError("cannot create " + (dir / "objects").string() + ": " + ec.message());
    const MergedCloud merged = scene.assemble();
    ply_write(merged.cloud, dir / "scene.ply");
    Scene coarse = scene;
    coarse.environment = scene.environment_coarse.empty() ? scene.environment : scene.environment_coarse;
    ply_write(coarse.assemble().cloud, dir / "scene_coarse.ply");
    ply_write(scene.environment, dir / "environment.ply");
    if (!scene.environment_coarse.empty()) ply_write(scene.environment_coarse, dir / "environment_coarse.ply");
    nlohmann::json ranges = nlohmann::json::array();
    ranges.push_back({{"id", "environment"}, {"begin", merged.ranges[0].first}, {"end", merged.ranges[0].second}});
    for (std::size_t k = 0; k < scene.layout.objects.size(); ++k) {
        const auto& id = scene.layout.objects[k].id;
        ply_write(scene.objects.at(id), dir / "objects" / (id + ".ply"));
        ranges.push_back({{"id", id}, {"begin", merged.ranges[k + 1].first}, {"end", merged.ranges[k + 1].second}});
    }
    const nlohmann::json meta{{"layout", layout_to_json(scene.layout)}, {"seed", scene.seed}, {"ranges", ranges}};
    std::ofstream out(dir / "scene.json");
    if (!out) throw IoError("cannot write " + (dir / "scene.json").string());
    out << meta.dump(2) << '\n';
}

Scene load_scene(const std::filesystem::path& dir) {
    const auto meta_path = dir / "scene.json";
    std::ifstream in(meta_path);
    if (!in) throw IoError("cannot open " + meta_path.string());
    nlohmann::json meta;
    try {
        in >> meta;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(meta_path.string() + ": " + e.what(), e.byte);
    }
    if (!meta.is_object() || !meta.contains("layout")) throw ParseError(meta_path.string() + ": missing 'layout'");
    Scene scene;
    scene.layout = layout_from_json(meta["layout"]);
    if (meta.contains("seed") && meta["seed"].is_number_unsigned()) scene.seed = meta["seed"].get<std::uint64_t>();
    scene.environment = ply_read(dir / "environment.ply");
    if (std::filesystem::exists(dir / "environment_coarse.ply")) {
        scene.environment_coarse = ply_read(dir / "environment_coarse.ply");
    }
    for (const auto& spec : scene.layout.objects) {
        scene.objects[spec.id] = ply_read(dir / "objects" / (spec.id + ".ply"));
    }
    return scene;
}

double foreground_color_error(const RenderOutput& rendered, const Eigen::Vector3d& background,
                              const Eigen::Vector3d& target) {
    double total = 0.0;
    std::size_t count = 0;
    for (int y = 0; y < rendered.color.height; ++y) {
        for (int x = 0; x < rendered.color.width; ++x) {
            const double a = rendered.alpha.at(x, y);
            if (a < 0.5) continue;
            const Eigen::Vector3d c = (rendered.color.rgb(x, y) - (1.0 - a) * background) / a;
            total += (c - target).norm();
            ++count;
        }
    }
    return count == 0 ? std::numeric_limits<double>::infinity() : total / double(count);
}

} // namespace dreamscene
