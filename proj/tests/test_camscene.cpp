#include "dreamscene/camscene.hpp"
#include "dreamscene/error.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <numbers>
#include <sstream>

using namespace dreamscene;

namespace {

SceneLayout indoor_layout() {
    SceneLayout l;
    l.kind = EnvironmentKind::indoor;
    l.room = {8, 6, 3};
    ObjectSpec a;
    a.id = "table";
    a.translation = {-2, 0, 0.5};
    a.bounding_radius = 0.5;
    ObjectSpec b = a;
    b.id = "lamp";
    b.translation = {2, 1, 0.5};
    l.objects = {a, b};
    return l;
}

SceneLayout outdoor_layout() {
    SceneLayout l;
    l.kind = EnvironmentKind::outdoor;
    l.radius = 10;
    ObjectSpec tree;
    tree.id = "tree";
    tree.translation = {4, 3, 1};
    tree.bounding_radius = 1;
    l.objects = {tree};
    return l;
}

} // namespace

TEST(Layout, JsonRoundTrip) {
    const auto j = nlohmann::json::parse(R"({
        "environment": {"kind": "indoor", "dims": [8, 6, 3], "condition": "walls"},
        "objects": [{"id": "sofa", "condition": "red", "bounding_radius": 0.6,
                     "placement": {"s": 1.5, "yaw_deg": 90, "t": [1, 1, 0.6]}}]})");
    const SceneLayout l = layout_from_json(j);
    EXPECT_EQ(l.kind, EnvironmentKind::indoor);
    EXPECT_EQ(l.condition, "walls");
    EXPECT_EQ(l.ground_condition, "ground");
    ASSERT_EQ(l.objects.size(), 1u);
    EXPECT_EQ(l.objects[0].scale, 1.5);
    EXPECT_NEAR((l.objects[0].placement().apply({1, 0, 0}) - Eigen::Vector3d(1, 2.5, 0.6)).norm(), 0.0, 1e-12);
    EXPECT_EQ(layout_to_json(layout_from_json(layout_to_json(l))), layout_to_json(l));
}

TEST(Layout, RejectsBadInput) {
    EXPECT_THROW(layout_from_json(nlohmann::json::parse(R"({"environment": {"kind": "cave"}})")), ParseError);
    EXPECT_THROW(layout_from_json(nlohmann::json::parse(R"({"environment": {"kind": "outdoor"}})")), ParseError);
    SceneLayout l = indoor_layout();
    l.objects[1].id = "table";
    EXPECT_THROW(l.validate(), ValidationError);
    l = indoor_layout();
    l.objects[0].translation.x() = 3.8;
    EXPECT_THROW(l.validate(), ValidationError);
    EXPECT_THROW(l.object("nope"), NotFoundError);
}

TEST(Partition, OutdoorRings) {
    const auto regions = partition_regions(outdoor_layout());
    ASSERT_EQ(regions.size(), 3u);
    EXPECT_NEAR(regions[0].outer_radius, 10.0 / 3, 1e-12);
    EXPECT_NEAR(regions[1].outer_radius, 20.0 / 3, 1e-12);
    EXPECT_NEAR(regions[2].outer_radius, 10.0, 1e-12);
    EXPECT_TRUE(regions[1].contains({5, 0}));
    EXPECT_FALSE(regions[1].contains({2, 0}));
}

TEST(Partition, IndoorWithoutObjectsIsGridOnly) {
    SceneLayout l = indoor_layout();
    l.objects.clear();
    const auto regions = partition_regions(l);
    EXPECT_EQ(regions.size(), 12u); // 8x6 room, 2-unit cells
    for (const auto& r : regions) EXPECT_EQ(r.kind, Region::Kind::residual);
}

TEST(Partition, IndoorFocalRegionsAreDisjointAndCoverFloor) {
    SceneLayout l = indoor_layout();
    l.objects[1].translation = {-0.8, 0.5, 0.5}; // overlapping disks, Voronoi split
    const auto regions = partition_regions(l);
    int focal = 0;
    double area = 0.0;
    for (const auto& r : regions) {
        focal += r.kind == Region::Kind::focal;
        area += r.area;
    }
    EXPECT_EQ(focal, 2);
    EXPECT_NEAR(area, 48.0, 0.48);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> ux(-4, 4), uy(-3, 3);
    for (int k = 0; k < 2000; ++k) {
        const Eigen::Vector2d p(ux(rng), uy(rng));
        int owners = 0;
        for (const auto& r : regions) owners += r.contains(p);
        EXPECT_EQ(owners, 1);
    }
}

TEST(Collision, Boundaries) {
    SceneLayout empty;
    empty.kind = EnvironmentKind::indoor;
    Camera c;
    c.position = {0, 0, 1.5};
    EXPECT_FALSE(collision_check(c, empty));
    const SceneLayout l = indoor_layout();
    c.position = l.objects[0].translation;
    EXPECT_TRUE(collision_check(c, l));
    c.position = l.objects[0].translation + Eigen::Vector3d(0.5 + 0.1 + 1e-9, 0, 0);
    EXPECT_FALSE(collision_check(c, l));
    c.position = l.objects[0].translation + Eigen::Vector3d(0.5 + 0.1 - 1e-9, 0, 0);
    EXPECT_TRUE(collision_check(c, l));
    c.position = {3.9, 0, 1.5};
    EXPECT_TRUE(collision_check(c, l)); // inside the wall margin
    c.position = {0, 0, 11};
    EXPECT_TRUE(collision_check(c, outdoor_layout()));
}

TEST(Sampling, PitchWindowsAndCollisions) {
    for (auto kind : {EnvironmentKind::indoor, EnvironmentKind::outdoor}) {
        const SceneLayout l = kind == EnvironmentKind::indoor ? indoor_layout() : outdoor_layout();
        for (int stage : {1, 2}) {
            const SamplingConfig cfg = default_sampling(kind, stage);
            std::mt19937_64 rng(stage * 10 + int(kind));
            for (int k = 0; k < 300; ++k) {
                for (const Camera& c : sample_cameras(l, cfg, (k % 10) / 9.0, rng)) {
                    EXPECT_GE(degrees(c.pitch), cfg.pitch_min_deg - 1e-9);
                    EXPECT_LE(degrees(c.pitch), cfg.pitch_max_deg + 1e-9);
                    EXPECT_FALSE(collision_check(c, l));
                }
            }
        }
    }
}

TEST(Sampling, OutdoorGroups) {
    const SceneLayout l = outdoor_layout();
    std::mt19937_64 rng(5);
    const auto early = sample_cameras(l, default_sampling(EnvironmentKind::outdoor, 1), 0.2, rng);
    ASSERT_EQ(early.size(), 1u);
    EXPECT_LE(early[0].position.head<2>().norm(), 1.0 + 1e-12);

    const auto late = sample_cameras(l, default_sampling(EnvironmentKind::outdoor, 1), 0.7, rng);
    ASSERT_EQ(late.size(), 4u);
    std::vector<double> dist;
    for (const auto& c : late) {
        EXPECT_EQ(c.yaw, late[0].yaw);
        EXPECT_EQ(c.pitch, late[0].pitch);
        dist.push_back(c.position.head<2>().norm());
    }
    std::sort(dist.begin(), dist.end());
    EXPECT_NEAR(dist[0], 2.5, 1e-12);
    EXPECT_NEAR(dist[1], 2.5, 1e-12);
    EXPECT_NEAR(dist[3], 5.0, 1e-12);

    const auto rings = sample_cameras(l, default_sampling(EnvironmentKind::outdoor, 2), 0.0, rng);
    ASSERT_EQ(rings.size(), 4u);
    for (std::size_t k = 1; k < rings.size(); ++k) {
        EXPECT_NEAR(rings[k].yaw, rings[0].yaw, 1e-9);
        EXPECT_GT(rings[k].position.head<2>().norm(), rings[k - 1].position.head<2>().norm());
    }
}

TEST(Sampling, DeterministicAndStarves) {
    const SceneLayout l = indoor_layout();
    std::mt19937_64 a(3), b(3);
    const auto cfg = default_sampling(EnvironmentKind::indoor, 2);
    const auto pa = sample_cameras(l, cfg, 0.5, a), pb = sample_cameras(l, cfg, 0.5, b);
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(pa[k].position, pb[k].position);

    SceneLayout blocked = indoor_layout();
    blocked.objects = {ObjectSpec{"boulder", "x", 1.0, 0.0, {0, 0, 1.5}, 1.5}};
    SamplingConfig tight = default_sampling(EnvironmentKind::indoor, 1);
    tight.max_retries = 4;
    std::mt19937_64 rng(1);
    EXPECT_THROW(sample_cameras(blocked, tight, 0.0, rng), StarvationError);
}

TEST(Stage3Union, SetSemantics) {
    std::vector<Camera> a, b;
    for (int k = 0; k < 5; ++k) {
        Camera c;
        c.position = {double(k), 0, 1};
        a.push_back(c);
    }
    for (int k = 0; k < 7; ++k) {
        Camera c;
        c.position = {double(k), 5, 1};
        b.push_back(c);
    }
    EXPECT_EQ(stage3_union(a, b).size(), 12u);
    EXPECT_EQ(stage3_union(a, a).size(), 5u);
    std::vector<Camera> overlap(b.begin(), b.end());
    overlap[0] = a[1];
    overlap[3] = a[4];
    overlap[6] = a[0];
    overlap[6].yaw += radians(0.005);
    EXPECT_EQ(stage3_union(a, overlap).size(), 5u + 7u - 3u);
    EXPECT_EQ(stage3_union(a, overlap).size(), stage3_union(overlap, a).size());
}

TEST(Orbit, LooksAtCenter) {
    const Eigen::Vector3d center(1, 2, 0.5);
    for (double elev : {-0.4, 0.0, 0.7}) {
        const Camera c = orbit_camera(center, 3.0, 1.1, elev, CameraTemplate{});
        EXPECT_NEAR((c.forward() - (center - c.position).normalized()).norm(), 0.0, 1e-12);
    }
}

TEST(PoseCsv, Layout) {
    std::vector<Camera> cams(2);
    cams[1].yaw = std::numbers::pi;
    std::vector<int> stages{1, 2};
    std::ostringstream out;
    write_pose_csv(cams, stages, out);
    EXPECT_EQ(out.str().substr(0, 34), "stage,x,y,z,yaw_deg,pitch_deg\n1,0,");
    EXPECT_NE(out.str().find("\n2,0,0,0,180,90\n"), std::string::npos);
}
