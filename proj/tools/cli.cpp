#include "cli.hpp"

#include "dreamscene/error.hpp"
#include "dreamscene/parallel.hpp"
#include "dreamscene/pipeline.hpp"
#include "dreamscene/ply.hpp"
#include "dreamscene/render.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <random>

namespace dreamscene::cli {

namespace fs = std::filesystem;

namespace {

int exit_code(ErrorCategory category) {
    switch (category) {
    case ErrorCategory::validation: return kValidation;
    case ErrorCategory::degenerate: return kDegenerate;
    case ErrorCategory::parse: return kParse;
    case ErrorCategory::io: return kIo;
    case ErrorCategory::starvation: return kStarvation;
    case ErrorCategory::numeric: return kNumeric;
    case ErrorCategory::not_found: return kNotFound;
    }
    return kInternal;
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what(), e.byte);
    }
}

void write_json(const nlohmann::json& j, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

Eigen::Vector3d vec3(const std::vector<double>& v) { return {v.at(0), v.at(1), v.at(2)}; }

Eigen::Vector3d json_vec3(const nlohmann::json& j, const std::string& key) {
    if (!j.contains(key) || !j[key].is_array() || j[key].size() != 3) {
        throw ParseError("camera: '" + key + "' must be an array of 3 numbers");
    }
    Eigen::Vector3d v;
    for (int k = 0; k < 3; ++k) {
        if (!j[key][k].is_number()) throw ParseError("camera: '" + key + "' must be numeric");
        v[k] = j[key][k].get<double>();
    }
    return v;
}

/// Seed precedence: --seed, then the config file, then DREAMSCENE_SEED, then a fresh draw.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const std::optional<std::uint64_t>& from_config) {
    if (flag) return *flag;
    if (from_config) return *from_config;
    if (const char* env = std::getenv("DREAMSCENE_SEED"); env && *env) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (*end != '\0') throw ParseError(std::string("DREAMSCENE_SEED is not an integer: ") + env);
        return v;
    }
    std::random_device rd;
    return (std::uint64_t(rd()) << 32) ^ rd();
}

/// Flags shared by the optimizing commands.
struct RunFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    int workers = 0;
    std::string oracle_dir;
    std::string schedule_kind = "scaled_linear";
    int T = 1000;
    double sigma2 = 0.01;
    std::optional<int> max_iter_object, max_iter_env, K, width, height, compress_iter, recon_steps;
    std::optional<double> gamma;
    std::string chain;

    void add(CLI::App& app) {
        app.add_option("--config", config_path, "Run configuration JSON")->check(CLI::ExistingFile);
        app.add_option("--seed", seed, "Random seed (falls back to DREAMSCENE_SEED)");
        app.add_option("--workers", workers, "Worker threads (0 = all logical processors)")->check(CLI::NonNegativeNumber);
        app.add_option("--oracle", oracle_dir, "Oracle directory of <condition>.ppm means")->required();
        app.add_option("--noise-schedule", schedule_kind, "Noise schedule kind");
        app.add_option("--T", T, "Number of diffusion timesteps");
        app.add_option("--sigma2", sigma2, "Oracle variance when oracle.json gives none");
        app.add_option("--max-iter-object", max_iter_object, "Object iterations");
        app.add_option("--max-iter-env", max_iter_env, "Environment iterations");
        app.add_option("--K", K, "Reconstruction views");
        app.add_option("--width", width, "Render width");
        app.add_option("--height", height, "Render height");
        app.add_option("--compress-iter", compress_iter, "Filtering period");
        app.add_option("--recon-steps", recon_steps, "Reconstruction steps");
        app.add_option("--gamma", gamma, "Filter compression ratio");
        app.add_option("--chain", chain, "MTS chain: ddim or independent");
    }

    RunConfig config() const {
        RunConfig c;
        std::optional<std::uint64_t> config_seed;
        if (!config_path.empty()) {
            const nlohmann::json j = read_json(config_path);
            c = config_from_json(j);
            if (j.contains("seed")) config_seed = c.seed;
        }
        if (max_iter_object) c.max_iter_object = *max_iter_object;
        if (max_iter_env) c.max_iter_env = *max_iter_env;
        if (K) c.K = *K;
        if (width) c.camera.width = *width;
        if (height) c.camera.height = *height;
        if (compress_iter) c.compress_iter = *compress_iter;
        if (recon_steps) c.recon_steps = *recon_steps;
        if (gamma) c.gamma = *gamma;
        if (!chain.empty()) c = config_from_json({{"chain", chain}}, c);
        c.seed = resolve_seed(seed, config_seed);
        c.workers = resolve_workers(workers);
        c.validate();
        return c;
    }

    AnalyticGaussianGuidance model() const {
        return AnalyticGaussianGuidance::load_directory(oracle_dir, build_schedule(parse_schedule_kind(schedule_kind), T),
                                                        sigma2);
    }
};

nlohmann::json run_report(const std::string& command, const RunConfig& config, const RunReport& report) {
    return {{"command", command}, {"seed", config.seed}, {"config", config_to_json(config)}, {"report", report.to_json()}};
}

void render_views(const GaussianCloud& cloud, const std::vector<Camera>& views, const fs::path& dir, int workers) {
    fs::create_directories(dir);
    RenderOptions opts;
    opts.workers = workers;
    for (std::size_t k = 0; k < views.size(); ++k) {
        char name[32];
        std::snprintf(name, sizeof name, "view_%03zu.ppm", k);
        write_ppm(render_forward(cloud, views[k], opts).color, dir / name);
    }
}

void add_object_command(CLI::App& app, std::function<void()>& action) {
    auto* cmd = app.add_subcommand("object", "Generate one object from a condition");
    auto flags = std::make_shared<RunFlags>();
    auto condition = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto coarse_out = std::make_shared<std::string>();
    auto report = std::make_shared<std::string>();
    auto views_dir = std::make_shared<std::string>();
    flags->add(*cmd);
    cmd->add_option("--condition", *condition, "Condition id")->required();
    cmd->add_option("--out", *out, "Output PLY")->required();
    cmd->add_option("--coarse-out", *coarse_out, "Coarse checkpoint PLY (default <out>.coarse.ply)");
    cmd->add_option("--report", *report, "Run report JSON (default <out>.json)");
    cmd->add_option("--views-dir", *views_dir, "Write renders of the evaluation views here");
    cmd->callback([=, &action] {
        action = [=] {
            const RunConfig config = flags->config();
            const auto model = flags->model();
            if (!model.has_condition(*condition)) throw NotFoundError("condition '" + *condition + "' is not registered");
            const ObjectResult res = generate_object(model, *condition, config);
            const fs::path path(*out);
            if (path.has_parent_path()) fs::create_directories(path.parent_path());
            ply_write(res.cloud, path);
            ply_write(res.coarse, coarse_out->empty() ? fs::path(path).replace_extension(".coarse.ply") : fs::path(*coarse_out));
            write_json(run_report("object", config, res.report),
                       report->empty() ? fs::path(path).replace_extension(".json") : fs::path(*report));
            if (!views_dir->empty()) render_views(res.cloud, res.views, *views_dir, config.workers);
        };
    });
}

void add_scene_command(CLI::App& app, std::function<void()>& action) {
    auto* cmd = app.add_subcommand("scene", "Generate a full scene from a layout");
    auto flags = std::make_shared<RunFlags>();
    auto layout_path = std::make_shared<std::string>();
    auto objects_dir = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    flags->add(*cmd);
    cmd->add_option("--layout", *layout_path, "Layout JSON")->required()->check(CLI::ExistingFile);
    cmd->add_option("--objects", *objects_dir, "Directory of <id>.ply object clouds; missing ones are generated");
    cmd->add_option("--out", *out, "Output scene directory")->required();
    cmd->callback([=, &action] {
        action = [=] {
            const RunConfig config = flags->config();
            const SceneLayout layout = load_layout(*layout_path);
            const auto model = flags->model();
            for (const char* id : {"environment", "ground"}) {
                if (!model.has_condition(id)) throw NotFoundError(std::string("condition '") + id + "' is not registered");
            }
            const fs::path dir(*out);
            std::map<std::string, GaussianCloud> objects;
            std::map<std::string, GaussianCloud> coarse;
            nlohmann::json object_reports = nlohmann::json::object();
            for (const auto& spec : layout.objects) {
                const fs::path given = objects_dir->empty() ? fs::path() : fs::path(*objects_dir) / (spec.id + ".ply");
                if (!given.empty() && fs::exists(given)) {
                    objects[spec.id] = ply_read(given);
                    const fs::path given_coarse = fs::path(*objects_dir) / (spec.id + ".coarse.ply");
                    if (fs::exists(given_coarse)) coarse[spec.id] = ply_read(given_coarse);
                    continue;
                }
                if (!model.has_condition(spec.condition)) {
                    throw NotFoundError("condition '" + spec.condition + "' of object '" + spec.id + "' is not registered");
                }
                RunConfig object_config = config;
                object_config.seed = derive_seed(config.seed, 1000 + objects.size());
                ObjectResult res = generate_object(model, spec.condition, object_config);
                object_reports[spec.id] = res.report.to_json();
                objects[spec.id] = std::move(res.cloud);
                coarse[spec.id] = std::move(res.coarse);
            }
            const SceneResult res = generate_scene(layout, objects, model, config);
            save_scene(res.scene, dir);
            for (const auto& [id, cloud] : coarse) ply_write(cloud, dir / "objects" / (id + ".coarse.ply"));
            std::vector<Camera> poses = res.stage1_poses;
            std::vector<int> stages(poses.size(), 1);
            poses.insert(poses.end(), res.stage2_poses.begin(), res.stage2_poses.end());
            stages.resize(poses.size(), 2);
            auto csv = open_out(dir / "poses.csv");
            write_pose_csv(poses, stages, csv);
            nlohmann::json report = run_report("scene", config, res.report);
            report["objects"] = object_reports;
            write_json(report, dir / "report.json");
        };
    });
}

void add_filter_command(CLI::App& app, std::function<void()>& action) {
    auto* cmd = app.add_subcommand("filter", "Score and prune the Gaussians of a PLY");
    auto in = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto csv = std::make_shared<std::string>();
    auto gamma = std::make_shared<double>(0.6);
    auto views = std::make_shared<int>(20);
    auto radius = std::make_shared<double>(1.25);
    auto size = std::make_shared<int>(64);
    auto seed = std::make_shared<std::optional<std::uint64_t>>();
    auto workers = std::make_shared<int>(0);
    cmd->add_option("--in", *in, "Input PLY")->required();
    cmd->add_option("--out", *out, "Output PLY")->required();
    cmd->add_option("--gamma", *gamma, "Fraction of Gaussians to remove");
    cmd->add_option("--views", *views, "Number of orbit views used for scoring")->check(CLI::PositiveNumber);
    cmd->add_option("--radius", *radius, "Orbit radius of the scoring views");
    cmd->add_option("--size", *size, "Scoring view resolution")->check(CLI::PositiveNumber);
    cmd->add_option("--scores", *csv, "Per-Gaussian score CSV");
    cmd->add_option("--seed", *seed, "Seed for the scoring views");
    cmd->add_option("--workers", *workers, "Worker threads (0 = all logical processors)")->check(CLI::NonNegativeNumber);
    cmd->callback([=, &action] {
        action = [=] {
            const GaussianCloud cloud = ply_read(*in);
            RunConfig c;
            c.K = *views;
            c.orbit_radius_factor = *radius / c.object_radius;
            c.camera.width = c.camera.height = *size;
            const auto cameras = object_views(c, derive_seed(resolve_seed(*seed, std::nullopt), 2));
            const auto scores = filter_scores(cloud, cameras, resolve_workers(*workers));
            const auto [kept, report] = filter_prune(cloud, scores, *gamma);
            const fs::path path(*out);
            if (path.has_parent_path()) fs::create_directories(path.parent_path());
            ply_write(kept, path);
            if (!csv->empty()) {
                auto f = open_out(*csv);
                write_filter_csv(report, f);
            }
        };
    });
}

Camera camera_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ParseError("camera must be a JSON object");
    CameraTemplate tmpl;
    auto num = [&](const char* key, double fallback) {
        if (!j.contains(key)) return fallback;
        if (!j[key].is_number()) throw ParseError(std::string("camera: '") + key + "' must be a number");
        return j[key].get<double>();
    };
    tmpl.vertical_fov_deg = num("vertical_fov_deg", tmpl.vertical_fov_deg);
    tmpl.width = int(num("width", tmpl.width));
    tmpl.height = int(num("height", tmpl.height));
    tmpl.near = num("near", tmpl.near);
    tmpl.far = num("far", tmpl.far);
    Camera cam;
    if (j.contains("target")) {
        cam = Camera::look_at(json_vec3(j, "position"), json_vec3(j, "target"), radians(tmpl.vertical_fov_deg),
                              tmpl.width, tmpl.height, tmpl.near, tmpl.far);
    } else {
        cam = make_camera(json_vec3(j, "position"), radians(num("yaw_deg", 0.0)), radians(num("pitch_deg", 90.0)),
                          tmpl);
    }
    cam.validate();
    return cam;
}

void add_render_command(CLI::App& app, std::function<void()>& action) {
    auto* cmd = app.add_subcommand("render", "Render a PLY from one camera to PPM");
    auto in = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto depth = std::make_shared<std::string>();
    auto camera = std::make_shared<std::string>();
    auto orbit = std::make_shared<std::vector<double>>(std::vector<double>{0.0, 15.0, 1.25});
    auto center = std::make_shared<std::vector<double>>(std::vector<double>{0.0, 0.0, 0.0});
    auto background = std::make_shared<std::vector<double>>(std::vector<double>{0.0, 0.0, 0.0});
    auto size = std::make_shared<std::vector<int>>(std::vector<int>{64, 64});
    auto workers = std::make_shared<int>(0);
    cmd->add_option("--in", *in, "Input PLY")->required();
    cmd->add_option("--out", *out, "Output PPM")->required();
    cmd->add_option("--depth", *depth, "Optional depth output (PFM)");
    auto* cam_opt = cmd->add_option("--camera", *camera, "Camera JSON {position, target | yaw_deg, pitch_deg, ...}")
                        ->check(CLI::ExistingFile);
    cmd->add_option("--orbit", *orbit, "Orbit camera: azimuth_deg elevation_deg radius")
        ->expected(3)
        ->excludes(cam_opt);
    cmd->add_option("--center", *center, "Orbit center x y z")->expected(3);
    cmd->add_option("--size", *size, "Orbit camera width height")->expected(2);
    cmd->add_option("--background", *background, "Background r g b")->expected(3);
    cmd->add_option("--workers", *workers, "Worker threads (0 = all logical processors)")->check(CLI::NonNegativeNumber);
    cmd->callback([=, &action] {
        action = [=] {
            const GaussianCloud cloud = ply_read(*in);
            Camera cam;
            if (!camera->empty()) {
                cam = camera_from_json(read_json(*camera));
            } else {
                CameraTemplate tmpl;
                tmpl.width = size->at(0);
                tmpl.height = size->at(1);
                cam = orbit_camera(vec3(*center), orbit->at(2), radians(orbit->at(0)), radians(orbit->at(1)), tmpl);
            }
            RenderOptions opts;
            opts.background = vec3(*background);
            opts.workers = resolve_workers(*workers);
            const RenderOutput r = render_forward(cloud, cam, opts);
            const fs::path path(*out);
            if (path.has_parent_path()) fs::create_directories(path.parent_path());
            write_ppm(r.color, path);
            if (!depth->empty()) write_depth(r.depth, *depth);
        };
    });
}

void add_cameras_command(CLI::App& app, std::function<void()>& action, std::ostream& stdout_stream) {
    auto* cmd = app.add_subcommand("cameras", "Dump sampled camera poses for a stage");
    auto layout_path = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto stage = std::make_shared<int>(1);
    auto count = std::make_shared<int>(100);
    auto progress = std::make_shared<std::optional<double>>();
    auto seed = std::make_shared<std::optional<std::uint64_t>>();
    cmd->add_option("--layout", *layout_path, "Layout JSON")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", *out, "Output CSV (stdout when omitted)");
    cmd->add_option("--stage", *stage, "Sampling stage")->check(CLI::IsMember({1, 2}));
    cmd->add_option("--count", *count, "Number of sampling calls")->check(CLI::PositiveNumber);
    cmd->add_option("--progress", *progress, "Fixed stage progress in [0, 1] (default sweeps 0..1)")
        ->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--seed", *seed, "Random seed (falls back to DREAMSCENE_SEED)");
    cmd->callback([=, &action, &stdout_stream] {
        action = [=, &stdout_stream] {
            const SceneLayout layout = load_layout(*layout_path);
            const SamplingConfig cfg = default_sampling(layout.kind, *stage);
            Rng rng(resolve_seed(*seed, std::nullopt));
            std::vector<Camera> poses;
            for (int k = 0; k < *count; ++k) {
                const double p = progress->value_or(*count > 1 ? double(k) / (*count - 1) : 0.0);
                const auto batch = sample_cameras(layout, cfg, p, rng);
                poses.insert(poses.end(), batch.begin(), batch.end());
            }
            const std::vector<int> stages(poses.size(), *stage);
            if (out->empty()) {
                write_pose_csv(poses, stages, stdout_stream);
            } else {
                auto f = open_out(*out);
                write_pose_csv(poses, stages, f);
            }
        };
    });
}

void add_schedule_command(CLI::App& app, std::function<void()>& action, std::ostream& stdout_stream) {
    auto* cmd = app.add_subcommand("schedule", "Dump the timestep plan table");
    auto max_iter = std::make_shared<int>(1500);
    auto T = std::make_shared<int>(1000);
    auto m0 = std::make_shared<int>(4);
    auto period = std::make_shared<int>(400);
    auto out = std::make_shared<std::string>();
    auto noise_out = std::make_shared<std::string>();
    auto kind = std::make_shared<std::string>("scaled_linear");
    auto seed = std::make_shared<std::optional<std::uint64_t>>();
    cmd->add_option("--max-iter", *max_iter, "Iteration budget")->check(CLI::PositiveNumber);
    cmd->add_option("--T", *T, "Number of diffusion timesteps")->check(CLI::PositiveNumber);
    cmd->add_option("--m0", *m0, "Initial number of timesteps per iteration")->check(CLI::PositiveNumber);
    cmd->add_option("--period", *period, "Iterations between decrements of m")->check(CLI::PositiveNumber);
    cmd->add_option("--out", *out, "Output CSV (stdout when omitted)");
    cmd->add_option("--noise-out", *noise_out, "Also write the noise schedule (t,beta,alpha_bar) CSV");
    cmd->add_option("--noise-schedule", *kind, "Noise schedule kind");
    cmd->add_option("--seed", *seed, "Random seed (falls back to DREAMSCENE_SEED)");
    cmd->callback([=, &action, &stdout_stream] {
        action = [=, &stdout_stream] {
            Rng rng(resolve_seed(*seed, std::nullopt));
            std::vector<TimestepPlan> plans;
            for (int iter = 0; iter <= *max_iter; ++iter) {
                plans.push_back(plan_timesteps(iter, *max_iter, *T, m_schedule(iter, *m0, *period), rng));
            }
            if (out->empty()) {
                write_plan_csv(plans, stdout_stream);
            } else {
                auto f = open_out(*out);
                write_plan_csv(plans, f);
            }
            if (!noise_out->empty()) {
                auto f = open_out(*noise_out);
                write_schedule_csv(build_schedule(parse_schedule_kind(*kind), *T), f);
            }
        };
    });
}

void add_edit_command(CLI::App& app, std::function<void()>& action) {
    auto* cmd = app.add_subcommand("edit", "Move, add, remove or restyle an object of a saved scene");
    auto flags = std::make_shared<RunFlags>();
    auto scene_dir = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto op = std::make_shared<std::string>();
    auto id = std::make_shared<std::string>();
    auto translation = std::make_shared<std::vector<double>>();
    auto scale = std::make_shared<std::optional<double>>();
    auto yaw = std::make_shared<std::optional<double>>();
    auto ply = std::make_shared<std::string>();
    auto condition = std::make_shared<std::string>();
    auto bounding_radius = std::make_shared<double>(0.5);
    auto iterations = std::make_shared<std::optional<int>>();
    auto no_reopt = std::make_shared<bool>(false);
    flags->add(*cmd);
    cmd->add_option("--scene", *scene_dir, "Scene directory")->required()->check(CLI::ExistingDirectory);
    cmd->add_option("--out", *out, "Output scene directory")->required();
    cmd->add_option("--op", *op, "Edit operation")->required()->check(CLI::IsMember({"move", "add", "remove", "restyle"}));
    cmd->add_option("--object", *id, "Object id")->required();
    cmd->add_option("--translation", *translation, "New translation x y z")->expected(3);
    cmd->add_option("--scale", *scale, "New uniform scale");
    cmd->add_option("--yaw", *yaw, "New yaw in degrees");
    cmd->add_option("--ply", *ply, "Object cloud for add, or coarse checkpoint for restyle");
    cmd->add_option("--condition", *condition, "Condition id for add or restyle");
    cmd->add_option("--bounding-radius", *bounding_radius, "Bounding radius for add");
    cmd->add_option("--iterations", *iterations, "Restyle iterations (default max-iter-object)");
    cmd->add_flag("--no-reoptimize", *no_reopt, "Skip environment re-optimization after move/add/remove");
    cmd->callback([=, &action] {
        action = [=] {
            const RunConfig config = flags->config();
            const auto model = flags->model();
            const Scene scene = load_scene(*scene_dir);
            const fs::path dir(*out);
            nlohmann::json report{{"command", "edit"}, {"op", *op}, {"object", *id}, {"seed", config.seed},
                                  {"config", config_to_json(config)}};
            std::map<std::string, GaussianCloud> coarse_objects;
            for (const auto& spec : scene.layout.objects) {
                const fs::path p = fs::path(*scene_dir) / "objects" / (spec.id + ".coarse.ply");
                if (fs::exists(p)) coarse_objects[spec.id] = ply_read(p);
            }
            Scene next = scene;
            if (*op == "restyle") {
                const ObjectSpec& spec = scene.layout.object(*id);
                if (condition->empty()) throw ValidationError("restyle needs --condition");
                if (!model.has_condition(*condition)) throw NotFoundError("condition '" + *condition + "' is not registered");
                GaussianCloud coarse;
                if (!ply->empty()) coarse = ply_read(*ply);
                else if (coarse_objects.count(spec.id)) coarse = coarse_objects.at(spec.id);
                else throw NotFoundError("no coarse checkpoint for object '" + spec.id + "'");
                const ObjectResult res =
                    edit_restyle(coarse, model, *condition, config, iterations->value_or(config.max_iter_object));
                next.objects[spec.id] = res.cloud;
                for (auto& o : next.layout.objects)
                    if (o.id == spec.id) o.condition = *condition;
                coarse_objects[spec.id] = res.coarse;
                report["report"] = res.report.to_json();
            } else {
                EditOp edit;
                if (*op == "move") {
                    const ObjectSpec& spec = scene.layout.object(*id);
                    edit = MoveOp{*id, scale->value_or(spec.scale), yaw->value_or(spec.yaw_deg),
                                  translation->empty() ? spec.translation : vec3(*translation)};
                } else if (*op == "add") {
                    if (ply->empty()) throw ValidationError("add needs --ply");
                    if (translation->empty()) throw ValidationError("add needs --translation");
                    ObjectSpec spec;
                    spec.id = *id;
                    spec.condition = condition->empty() ? *id : *condition;
                    spec.scale = scale->value_or(1.0);
                    spec.yaw_deg = yaw->value_or(0.0);
                    spec.translation = vec3(*translation);
                    spec.bounding_radius = *bounding_radius;
                    edit = AddOp{spec, ply_read(*ply)};
                } else {
                    edit = RemoveOp{*id};
                    coarse_objects.erase(*id);
                }
                auto [edited, plan] = edit_transform(scene, edit, config);
                report["poses"] = plan.poses.size();
                if (*no_reopt) {
                    next = std::move(edited);
                } else {
                    SceneResult res = reoptimize(edited, plan, model, config);
                    next = std::move(res.scene);
                    report["report"] = res.report.to_json();
                }
            }
            if (fs::exists(dir) && fs::equivalent(dir, fs::path(*scene_dir))) {
                throw ValidationError("--out must differ from --scene");
            }
            save_scene(next, dir);
            for (const auto& [oid, cloud] : coarse_objects) ply_write(cloud, dir / "objects" / (oid + ".coarse.ply"));
            write_json(report, dir / "report.json");
        };
    });
}

void add_oracle_command(CLI::App& app, std::function<void()>& action) {
    auto* cmd = app.add_subcommand("oracle", "Register a condition mean image with an oracle directory");
    auto dir = std::make_shared<std::string>();
    auto id = std::make_shared<std::string>();
    auto color = std::make_shared<std::vector<double>>();
    auto image = std::make_shared<std::string>();
    auto size = std::make_shared<std::vector<int>>(std::vector<int>{64, 64});
    auto sigma2 = std::make_shared<std::optional<double>>();
    cmd->add_option("--dir", *dir, "Oracle directory")->required();
    cmd->add_option("--id", *id, "Condition id ('null' sets the unconditional mean)")->required();
    auto* color_opt = cmd->add_option("--color", *color, "Flat mean color r g b")->expected(3);
    cmd->add_option("--image", *image, "Mean image PPM")->check(CLI::ExistingFile)->excludes(color_opt);
    cmd->add_option("--size", *size, "Width and height of a flat mean")->expected(2);
    cmd->add_option("--sigma2", *sigma2, "Oracle data variance, stored in oracle.json")->check(CLI::NonNegativeNumber);
    cmd->callback([=, &action] {
        action = [=] {
            if (color->empty() && image->empty() && !sigma2->has_value()) {
                throw ValidationError("oracle needs --color, --image or --sigma2");
            }
            if (id->empty() || id->find_first_of("/\\") != std::string::npos) throw ValidationError("invalid condition id");
            fs::create_directories(*dir);
            if (!color->empty()) {
                if (size->at(0) < 1 || size->at(1) < 1) throw ValidationError("--size must be positive");
                write_ppm(Image(size->at(0), size->at(1), vec3(*color)), fs::path(*dir) / (*id + ".ppm"));
            } else if (!image->empty()) {
                write_ppm(read_ppm(*image), fs::path(*dir) / (*id + ".ppm"));
            }
            if (sigma2->has_value()) {
                const fs::path meta = fs::path(*dir) / "oracle.json";
                nlohmann::json j = fs::exists(meta) ? read_json(meta) : nlohmann::json::object();
                j["sigma2"] = **sigma2;
                write_json(j, meta);
            }
        };
    });
}

} // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Text-to-3D scene generation with Gaussian splats"};
    app.name("dreamscene");
    app.require_subcommand(1);
    app.fallthrough(false);
    std::function<void()> action;
    add_object_command(app, action);
    add_scene_command(app, action);
    add_filter_command(app, action);
    add_render_command(app, action);
    add_cameras_command(app, action, out);
    add_schedule_command(app, action, out);
    add_edit_command(app, action);
    add_oracle_command(app, action);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::Success& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: usage: " << e.what() << '\n';
        return kUsage;
    }

    try {
        if (action) action();
        return kOk;
    } catch (const Error& e) {
        err << "error: " << to_string(e.category()) << ": " << e.what() << '\n';
        return exit_code(e.category());
    } catch (const fs::filesystem_error& e) {
        err << "error: io: " << e.what() << '\n';
        return kIo;
    } catch (const std::exception& e) {
        err << "error: internal: " << e.what() << '\n';
        return kInternal;
    }
}

} // namespace dreamscene::cli
