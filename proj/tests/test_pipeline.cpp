#include "dreamscene/error.hpp"
#include "dreamscene/pipeline.hpp"
#include "dreamscene/ply.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

using namespace dreamscene;

namespace {

AnalyticGaussianGuidance toy_model(int size) {
    AnalyticGaussianGuidance model(build_schedule(ScheduleKind::scaled_linear), 0.01);
    model.set_condition("red", Image(size, size, Eigen::Vector3d(1.0, 0.0, 0.0)));
    model.set_condition("blue", Image(size, size, Eigen::Vector3d(0.0, 0.0, 1.0)));
    model.set_condition("environment", Image(size, size, Eigen::Vector3d(0.3, 0.5, 0.8)));
    model.set_condition("ground", Image(size, size, Eigen::Vector3d(0.4, 0.3, 0.2)));
    return model;
}

RunConfig tiny_config() {
    RunConfig c;
    c.max_iter_object = 12;
    c.max_iter_env = 10;
    c.compress_iter = 4;
    c.K = 4;
    c.recon_steps = 6;
    c.densify_iter = 3;
    c.object_init_count = 64;
    c.env_init_count = 160;
    c.camera.width = 16;
    c.camera.height = 16;
    c.seed = 11;
    return c;
}

SceneLayout room_with_chair() {
    SceneLayout layout;
    layout.kind = EnvironmentKind::indoor;
    ObjectSpec chair;
    chair.id = "chair";
    chair.condition = "red";
    chair.scale = 0.6;
    chair.translation = {1.2, 0.0, 0.3};
    chair.bounding_radius = 0.3;
    layout.objects.push_back(chair);
    return layout;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("dreamscene_pipeline_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

std::uint64_t group_hash(const GaussianCloud& cloud, GaussianGroup group) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < cloud.size(); ++i)
        if (cloud.groups[i] == group) rows.push_back(i);
    const GaussianCloud picked = cloud.gather(rows);
    return parameter_hash(picked, 0, picked.size());
}

} // namespace

TEST(DeriveSeed, StreamsDiffer) {
    EXPECT_EQ(derive_seed(5, 1), derive_seed(5, 1));
    EXPECT_NE(derive_seed(5, 1), derive_seed(5, 2));
    EXPECT_NE(derive_seed(5, 1), derive_seed(6, 1));
}

TEST(RunConfig, JsonRoundTripAndUnknownKeys) {
    RunConfig c = tiny_config();
    c.chain = ChainMode::independent;
    c.adam.lr.color = 0.125;
    const RunConfig back = config_from_json(config_to_json(c));
    EXPECT_EQ(config_to_json(back), config_to_json(c));
    EXPECT_THROW(config_from_json(nlohmann::json{{"gama", 0.5}}), ParseError);
    EXPECT_THROW(config_from_json(nlohmann::json{{"gamma", "high"}}), ParseError);
    EXPECT_THROW(config_from_json(nlohmann::json{{"lr", {{"speed", 1}}}}), ParseError);
    EXPECT_THROW(config_from_json(nlohmann::json::array()), ParseError);
}

TEST(RunConfig, ValidationRejectsBadValues) {
    RunConfig c;
    c.stage_split = {0.5, 0.5, 0.5};
    EXPECT_THROW(c.validate(), ValidationError);
    c = RunConfig{};
    c.t_small = 201;
    EXPECT_THROW(c.validate(), ValidationError);
    c = RunConfig{};
    c.gamma = 1.0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = RunConfig{};
    c.max_iter_env = -1;
    EXPECT_THROW(c.validate(), ValidationError);
    EXPECT_NO_THROW(RunConfig{}.validate());
}

TEST(StagePlans, MasksAndBudgets) {
    SceneLayout outdoor;
    RunConfig c;
    auto plans = make_stage_plans(outdoor, c);
    EXPECT_EQ(plans[0].iterations, 800);
    EXPECT_EQ(plans[1].iterations, 600);
    EXPECT_EQ(plans[2].iterations, 600);
    EXPECT_TRUE(plans[0].freeze_ground);
    EXPECT_FALSE(plans[0].freeze_surroundings);
    EXPECT_FALSE(plans[1].freeze_ground);
    EXPECT_TRUE(plans[1].freeze_surroundings);
    EXPECT_FALSE(plans[2].freeze_ground);
    EXPECT_FALSE(plans[2].freeze_surroundings);
    EXPECT_FALSE(plans[0].render_objects);
    EXPECT_TRUE(plans[2].render_objects);
    EXPECT_EQ(plans[1].condition, outdoor.ground_condition);

    SceneLayout indoor;
    indoor.kind = EnvironmentKind::indoor;
    c.max_iter_env = 7;
    plans = make_stage_plans(indoor, c);
    EXPECT_TRUE(plans[0].render_objects);
    EXPECT_EQ(plans[0].iterations + plans[1].iterations + plans[2].iterations, 7);
    EXPECT_EQ(plans[0].sampling.pitch_min_deg, 75.0);
}

TEST(GenerateObject, SameSeedIsBitIdentical) {
    const auto model = toy_model(16);
    const RunConfig c = tiny_config();
    const auto a = generate_object(model, "red", c);
    const auto b = generate_object(model, "red", c);
    ASSERT_EQ(a.cloud.size(), b.cloud.size());
    EXPECT_EQ(parameter_hash(a.cloud, 0, a.cloud.size()), parameter_hash(b.cloud, 0, b.cloud.size()));
    EXPECT_EQ(int(a.views.size()), c.K);
    EXPECT_EQ(a.report.stages.at(0).residual_rms.size(), std::size_t(c.max_iter_object));
    RunConfig other = c;
    other.seed = 12;
    const auto d = generate_object(model, "red", other);
    EXPECT_NE(parameter_hash(a.cloud, 0, a.cloud.size()), parameter_hash(d.cloud, 0, d.cloud.size()));
}

TEST(GenerateObject, ZeroIterationsOnlyReconstructs) {
    const auto model = toy_model(16);
    RunConfig c = tiny_config();
    c.max_iter_object = 0;
    const auto res = generate_object(model, "red", c);
    EXPECT_EQ(res.coarse.size(), c.object_init_count);
    for (std::size_t i = 1; i < res.coarse.size(); ++i) {
        EXPECT_EQ(res.coarse.opacity_logits[i], res.coarse.opacity_logits[0]);
    }
    ASSERT_EQ(res.report.updates.size(), 1u);
    EXPECT_EQ(res.report.updates[0].kind, "recon");
    EXPECT_LT(res.report.recon_final_loss, res.report.recon_initial_loss);
}

TEST(GenerateObject, UnknownConditionFails) {
    const auto model = toy_model(16);
    EXPECT_ANY_THROW(generate_object(model, "green", tiny_config()));
}

TEST(EditRestyle, ZeroIterationsStartsFromCoarse) {
    const auto model = toy_model(16);
    const RunConfig c = tiny_config();
    const auto obj = generate_object(model, "red", c);
    const auto res = edit_restyle(obj.coarse, model, "blue", c, 0);
    EXPECT_EQ(parameter_hash(res.coarse, 0, res.coarse.size()), parameter_hash(obj.coarse, 0, obj.coarse.size()));
    EXPECT_THROW(edit_restyle(GaussianCloud{}, model, "blue", c, 0), ValidationError);
}

TEST(GenerateScene, ContractsHoldOnToyRoom) {
    const auto model = toy_model(16);
    const RunConfig c = tiny_config();
    const SceneLayout layout = room_with_chair();
    const auto chair = generate_object(model, "red", c).cloud;
    const std::map<std::string, GaussianCloud> objects{{"chair", chair}};
    const std::uint64_t chair_hash = parameter_hash(chair, 0, chair.size());

    std::uint64_t frozen_hash = 0;
    int last_stage = 0;
    bool frozen_stable = true;
    bool opacity_collapsed = false;
    SceneHooks hooks;
    hooks.after_step = [&](int stage, int, const GaussianCloud& env) {
        const GaussianGroup frozen_group = stage == 1 ? GaussianGroup::ground : GaussianGroup::surroundings;
        const std::uint64_t h = stage < 3 ? group_hash(env, frozen_group) : 0;
        if (stage != last_stage) {
            last_stage = stage;
            frozen_hash = h;
        } else if (h != frozen_hash) {
            frozen_stable = false;
        }
        bool all_same = true;
        for (std::size_t i = 1; i < env.size(); ++i) all_same &= env.opacity_logits[i] == env.opacity_logits[0];
        opacity_collapsed |= all_same;
    };
    const auto res = generate_scene(layout, objects, model, c, hooks);
    EXPECT_TRUE(frozen_stable);
    EXPECT_FALSE(opacity_collapsed);
    EXPECT_EQ(parameter_hash(res.scene.objects.at("chair"), 0, chair.size()), chair_hash);

    const auto plans = make_stage_plans(layout, c);
    ASSERT_EQ(res.report.stages.size(), 3u);
    for (int s = 0; s < 3; ++s) {
        EXPECT_EQ(res.report.stages[s].iterations, plans[s].iterations);
        EXPECT_EQ(res.report.stages[s].residual_rms.size(), std::size_t(plans[s].iterations));
    }
    EXPECT_EQ(res.stage1_poses.size(), res.report.stages[0].poses);
    for (const auto& u : res.report.updates) {
        if (u.kind == "densify" || u.kind == "prune") EXPECT_EQ(u.max_opacity_change, 0.0) << u.kind;
    }
    const MergedCloud merged = res.scene.assemble();
    ASSERT_EQ(merged.ranges.size(), 2u);
    EXPECT_EQ(merged.ranges[1].second - merged.ranges[1].first, chair.size());
    for (auto f : res.scene.environment.frozen) EXPECT_EQ(f, 0);
}

TEST(GenerateScene, OutdoorWithoutObjectsAndReplay) {
    const auto model = toy_model(16);
    const RunConfig c = tiny_config();
    SceneLayout layout;
    const auto a = generate_scene(layout, {}, model, c);
    const auto b = generate_scene(layout, {}, model, c);
    int total = 0;
    for (const auto& s : a.report.stages) total += s.iterations;
    EXPECT_EQ(total, c.max_iter_env);
    const auto da = scratch("replay_a"), db = scratch("replay_b");
    save_scene(a.scene, da);
    save_scene(b.scene, db);
    for (const char* f : {"scene.ply", "scene_coarse.ply", "environment.ply", "scene.json"}) {
        EXPECT_EQ(slurp(da / f), slurp(db / f)) << f;
    }
    std::filesystem::remove_all(da);
    std::filesystem::remove_all(db);
}

TEST(GenerateScene, MissingObjectCloudFails) {
    const auto model = toy_model(16);
    EXPECT_THROW(generate_scene(room_with_chair(), {}, model, tiny_config()), NotFoundError);
}

TEST(SceneIo, SaveLoadRoundTrip) {
    Scene scene;
    scene.layout = room_with_chair();
    scene.seed = 99;
    scene.environment = init_primitive(PrimitiveKind::cuboid_room, 50, scene.layout.room, 1);
    scene.environment_coarse = scene.environment;
    scene.objects["chair"] = init_primitive(PrimitiveKind::sphere, 20, Extent{0.5}, 2);
    const auto dir = scratch("io");
    save_scene(scene, dir);
    for (const char* f : {"scene.ply", "scene_coarse.ply", "scene.json", "environment.ply", "environment_coarse.ply",
                          "objects/chair.ply"}) {
        EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
    }
    const Scene back = load_scene(dir);
    EXPECT_EQ(back.seed, 99u);
    EXPECT_EQ(back.environment.size(), 50u);
    EXPECT_EQ(back.objects.at("chair").size(), 20u);
    EXPECT_EQ(layout_to_json(back.layout), layout_to_json(scene.layout));
    EXPECT_EQ(ply_read(dir / "scene.ply").size(), 70u);
    std::filesystem::remove_all(dir);
    EXPECT_THROW(load_scene(dir), IoError);
}

namespace {

Scene small_scene() {
    Scene scene;
    scene.layout = room_with_chair();
    scene.environment = init_primitive(PrimitiveKind::cuboid_room, 40, scene.layout.room, 1);
    scene.objects["chair"] = init_primitive(PrimitiveKind::sphere, 25, Extent{0.5}, 2);
    return scene;
}

} // namespace

TEST(EditTransform, IdenticalMoveDeduplicatesPoses) {
    const Scene scene = small_scene();
    const auto& spec = scene.layout.objects[0];
    const auto [same, plan] = edit_transform(scene, MoveOp{"chair", spec.scale, spec.yaw_deg, spec.translation},
                                             tiny_config());
    const auto [removed, remove_plan] = edit_transform(scene, RemoveOp{"chair"}, tiny_config());
    EXPECT_EQ(layout_to_json(same.layout), layout_to_json(scene.layout));
    EXPECT_EQ(plan.poses.size(), remove_plan.poses.size());
    EXPECT_EQ(plan.stage2_iterations, 1);
    EXPECT_EQ(plan.stage3_iterations, 1);
}

TEST(EditTransform, RemoveThenAddRestoresCount) {
    const Scene scene = small_scene();
    const std::size_t n = scene.assemble().cloud.size();
    const auto [removed, plan] = edit_transform(scene, RemoveOp{"chair"}, tiny_config());
    EXPECT_EQ(removed.assemble().cloud.size(), n - 25);
    const auto [added, plan2] =
        edit_transform(removed, AddOp{scene.layout.objects[0], scene.objects.at("chair")}, tiny_config());
    EXPECT_EQ(added.assemble().cloud.size(), n);
    EXPECT_FALSE(plan2.poses.empty());
}

TEST(EditTransform, MoveAcrossRoomCoversBothRegions) {
    const Scene scene = small_scene();
    const Eigen::Vector3d old_pos = scene.layout.objects[0].translation;
    const Eigen::Vector3d new_pos(-1.5, -1.0, 0.3);
    const auto [moved, plan] = edit_transform(scene, MoveOp{"chair", 0.6, 30.0, new_pos}, tiny_config());
    Eigen::Vector2d near_old = Eigen::Vector2d::Zero(), near_new = Eigen::Vector2d::Zero();
    int n_old = 0, n_new = 0;
    for (const auto& cam : plan.poses) {
        const Eigen::Vector2d p = cam.position.head<2>();
        if ((p - old_pos.head<2>()).norm() < (p - new_pos.head<2>()).norm()) {
            near_old += p;
            ++n_old;
        } else {
            near_new += p;
            ++n_new;
        }
    }
    ASSERT_GT(n_old, 0);
    ASSERT_GT(n_new, 0);
    EXPECT_LT((near_old / n_old - old_pos.head<2>()).norm(), 1.0);
    EXPECT_LT((near_new / n_new - new_pos.head<2>()).norm(), 1.0);
    EXPECT_EQ(moved.layout.objects[0].translation, new_pos);
}

TEST(EditTransform, RejectsUnknownIdsAndOverlaps) {
    const Scene scene = small_scene();
    EXPECT_THROW(edit_transform(scene, RemoveOp{"sofa"}, tiny_config()), NotFoundError);
    EXPECT_THROW(edit_transform(scene, MoveOp{"sofa", 1.0, 0.0, {0, 0, 0.3}}, tiny_config()), NotFoundError);
    ObjectSpec lamp = scene.layout.objects[0];
    lamp.id = "lamp";
    lamp.translation = {1.3, 0.1, 0.3};
    EXPECT_THROW(edit_transform(scene, AddOp{lamp, scene.objects.at("chair")}, tiny_config()), ValidationError);
    lamp.id = "chair";
    lamp.translation = {-1.5, 0.0, 0.3};
    EXPECT_THROW(edit_transform(scene, AddOp{lamp, scene.objects.at("chair")}, tiny_config()), ValidationError);
}

TEST(Reoptimize, RunsPlanBudgets) {
    const auto model = toy_model(16);
    RunConfig c = tiny_config();
    c.max_iter_env = 16;
    const Scene scene = small_scene();
    const auto [moved, plan] = edit_transform(scene, MoveOp{"chair", 0.6, 0.0, {-1.2, 0.5, 0.3}}, c);
    const auto res = reoptimize(moved, plan, model, c);
    ASSERT_EQ(res.report.stages.size(), 2u);
    EXPECT_EQ(res.report.stages[0].iterations, plan.stage2_iterations);
    EXPECT_EQ(res.report.stages[1].iterations, plan.stage3_iterations);
    EXPECT_EQ(parameter_hash(res.scene.objects.at("chair"), 0, 25),
              parameter_hash(scene.objects.at("chair"), 0, 25));
}

TEST(ForegroundColorError, UnpremultipliesAndSkipsBackground) {
    RenderOutput out;
    out.color = Image(2, 1, 0.0);
    out.alpha = Plane(2, 1, 0.0);
    out.alpha.at(0, 0) = 0.5;
    out.color.set_rgb(0, 0, Eigen::Vector3d(0.5 * 1.0 + 0.5 * 0.2, 0.5 * 0.2, 0.5 * 0.2));
    EXPECT_NEAR(foreground_color_error(out, Eigen::Vector3d::Constant(0.2), Eigen::Vector3d(1, 0, 0)), 0.0, 1e-12);
    out.alpha.at(0, 0) = 0.25;
    EXPECT_TRUE(std::isinf(foreground_color_error(out, Eigen::Vector3d::Zero(), Eigen::Vector3d::Zero())));
}
