#include "dreamscene/error.hpp"
#include "dreamscene/render.hpp"
#include "render_fixtures.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace dreamscene;
using dreamscene::testing::axis_camera;
using dreamscene::testing::random_scene;
using dreamscene::testing::weighted_sum;

namespace {

bool fd_close(double analytic, double numeric) {
    return std::abs(analytic - numeric) <= 1e-3 * std::max(std::abs(analytic), std::abs(numeric)) + 1e-7;
}

} // namespace

TEST(Camera, AxesMatchConvention) {
    Camera cam;
    cam.yaw = 0.0;
    cam.pitch = radians(90.0);
    EXPECT_NEAR((cam.forward() - Eigen::Vector3d(1, 0, 0)).norm(), 0.0, 1e-12);
    const Eigen::Matrix3d r = cam.world_to_camera();
    EXPECT_NEAR((r.row(0).transpose() - Eigen::Vector3d(0, -1, 0)).norm(), 0.0, 1e-12);
    EXPECT_NEAR((r.row(1).transpose() - Eigen::Vector3d(0, 0, -1)).norm(), 0.0, 1e-12);
    cam.pitch = radians(45.0);
    EXPECT_LT(cam.forward().z(), 0.0);
}

TEST(Project, IsotropicFootprintMatchesClosedForm) {
    GaussianCloud cloud;
    const double s = 0.2, z = 3.0;
    cloud.push_back({z, 0, 0}, Eigen::Vector3d::Constant(std::log(s)), Eigen::Quaterniond::Identity(), logit(0.5),
                    {0.7, 0.2, 0.4});
    const Camera cam = axis_camera(32, 32);
    const auto splats = project(cloud, cam);
    ASSERT_EQ(splats.size(), 1u);
    const double sigma_px = cam.focal() * s / z;
    EXPECT_NEAR(splats[0].cov(0, 0), sigma_px * sigma_px, 1e-9);
    EXPECT_NEAR(splats[0].cov(0, 1), 0.0, 1e-12);
    EXPECT_NEAR(splats[0].mean.x(), 16.0, 1e-12);

    const auto out = render_forward(cloud, cam);
    for (int y = 0; y < 32; y += 5) {
        for (int x = 0; x < 32; x += 3) {
            const double dx = x + 0.5 - 16.0, dy = y + 0.5 - 16.0;
            const double q = (dx * dx + dy * dy) / (sigma_px * sigma_px);
            const double alpha = q <= 9.0 ? 0.5 * std::exp(-0.5 * q) : 0.0;
            EXPECT_NEAR(out.alpha.at(x, y), alpha, 1e-12);
            EXPECT_NEAR(out.color.at(x, y, 0), 0.7 * alpha, 1e-12);
        }
    }
    EXPECT_NEAR(out.depth.at(16, 16), z, 1e-12);
}

TEST(Project, CullsBehindNearPlane) {
    GaussianCloud cloud;
    cloud.push_back({-1, 0, 0}, Eigen::Vector3d::Constant(-1.0), Eigen::Quaterniond::Identity(), 0.0, {1, 1, 1});
    EXPECT_TRUE(project(cloud, axis_camera()).empty());
    const auto out = render_forward(cloud, axis_camera());
    EXPECT_EQ(out.alpha.at(8, 8), 0.0);
    EXPECT_EQ(out.depth.at(8, 8), axis_camera().far);
}

TEST(Render, AlphaClampedAtPeak) {
    GaussianCloud cloud;
    cloud.push_back({2, 0, 0}, Eigen::Vector3d::Constant(std::log(2.0)), Eigen::Quaterniond::Identity(), 20.0,
                    {1, 1, 1});
    const auto out = render_forward(cloud, axis_camera());
    EXPECT_EQ(out.alpha.at(8, 8), kAlphaClamp);
}

TEST(Render, EmptyCloudIsBackground) {
    RenderOptions opts;
    opts.background = {0.1, 0.2, 0.3};
    const auto out = render_forward(GaussianCloud{}, axis_camera(5, 4), opts);
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 5; ++x) {
            EXPECT_EQ(out.color.rgb(x, y), opts.background);
            EXPECT_EQ(out.alpha.at(x, y), 0.0);
        }
    }
}

TEST(Render, SingleCenteredGaussianComposites) {
    GaussianCloud cloud;
    const Eigen::Vector3d c(0.9, 0.3, 0.6);
    cloud.push_back({2, 0, 0}, Eigen::Vector3d::Constant(std::log(0.3)), Eigen::Quaterniond::Identity(), logit(0.8),
                    c);
    RenderOptions opts;
    opts.background = {0.2, 0.4, 1.0};
    // Odd size puts a pixel center exactly on the projected mean.
    const auto out = render_forward(cloud, axis_camera(15, 15), opts);
    const Eigen::Vector3d expected = 0.8 * c + 0.2 * opts.background;
    EXPECT_LT((out.color.rgb(7, 7) - expected).norm(), 1e-12);
    EXPECT_NEAR(out.alpha.at(7, 7), 0.8, 1e-12);
}

TEST(Backward, ZeroAdjointGivesZeroGradients) {
    std::mt19937_64 rng(17);
    const GaussianCloud cloud = random_scene(rng, 4);
    const Camera cam = axis_camera(12, 12);
    const ParamGrads g = render_backward(cloud, cam, Image(12, 12, 0.0));
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        EXPECT_EQ(g.means[i], Eigen::Vector3d::Zero());
        EXPECT_EQ(g.log_scales[i], Eigen::Vector3d::Zero());
        EXPECT_EQ(g.opacity_logits[i], 0.0);
        EXPECT_EQ(g.sh_dc[i], Eigen::Vector3d::Zero());
    }
}

TEST(Render, FrontToBackOrder) {
    GaussianCloud cloud;
    const auto q = Eigen::Quaterniond::Identity();
    cloud.push_back({3, 0, 0}, Eigen::Vector3d::Constant(std::log(0.5)), q, logit(0.5), {0, 0, 1});
    cloud.push_back({2, 0, 0}, Eigen::Vector3d::Constant(std::log(0.5)), q, logit(0.5), {1, 0, 0});
    const auto out = render_forward(cloud, axis_camera());
    // The nearer (red) splat sits in front even though it was inserted second.
    EXPECT_GT(out.color.at(8, 8, 0), out.color.at(8, 8, 2));
}

TEST(Render, TiledMatchesReferenceBitForBit) {
    std::mt19937_64 rng(5);
    for (int scene = 0; scene < 5; ++scene) {
        GaussianCloud cloud = random_scene(rng, 40);
        const Camera cam = axis_camera(50, 37);
        RenderOptions tiled;
        tiled.background = {0.1, 0.2, 0.3};
        RenderOptions reference = tiled;
        reference.tiled = false;
        const auto a = render_forward(cloud, cam, tiled);
        const auto b = render_forward(cloud, cam, reference);
        EXPECT_EQ(a.color.data, b.color.data);
        EXPECT_EQ(a.alpha.data, b.alpha.data);
        EXPECT_EQ(a.depth.data, b.depth.data);
    }
}

TEST(Render, WorkerCountDoesNotChangeOutput) {
    std::mt19937_64 rng(9);
    const GaussianCloud cloud = random_scene(rng, 60);
    const Camera cam = axis_camera(48, 48);
    Image weights(48, 48);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& w : weights.data) w = u(rng);
    RenderOptions one, four;
    four.workers = 4;
    EXPECT_EQ(render_forward(cloud, cam, one).color.data, render_forward(cloud, cam, four).color.data);
    const auto g1 = render_backward(cloud, cam, weights, one);
    const auto g4 = render_backward(cloud, cam, weights, four);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        EXPECT_EQ(g1.means[i], g4.means[i]);
        EXPECT_EQ(g1.opacity_logits[i], g4.opacity_logits[i]);
    }
}

TEST(Render, SteepCutoffIsRespected) {
    GaussianCloud cloud;
    cloud.push_back({2, 0, 0}, Eigen::Vector3d::Constant(std::log(0.01)), Eigen::Quaterniond::Identity(), 0.0,
                    {1, 1, 1});
    const auto out = render_forward(cloud, axis_camera(64, 64));
    EXPECT_EQ(out.alpha.at(0, 0), 0.0);
}

TEST(Backward, RejectsMismatchedAdjoint) {
    std::mt19937_64 rng(1);
    const GaussianCloud cloud = random_scene(rng, 2);
    EXPECT_THROW(render_backward(cloud, axis_camera(16, 16), Image(8, 8)), ValidationError);
}

TEST(Backward, MatchesCentralDifferences) {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double h = 1e-5;
    const Camera cam = axis_camera(20, 20);
    RenderOptions opts;
    opts.background = {0.3, 0.1, 0.5};
    for (int scene = 0; scene < 6; ++scene) {
        GaussianCloud cloud = random_scene(rng, 1 + scene);
        Image weights(cam.width, cam.height);
        for (auto& w : weights.data) w = u(rng);
        const auto g = render_backward(cloud, cam, weights, opts);
        auto loss = [&](const GaussianCloud& c) { return weighted_sum(render_forward(c, cam, opts).color, weights); };
        for (std::size_t i = 0; i < cloud.size(); ++i) {
            for (int k = 0; k < 3; ++k) {
                GaussianCloud p = cloud, m = cloud;
                p.means[i][k] += h;
                m.means[i][k] -= h;
                EXPECT_PRED2(fd_close, g.means[i][k], (loss(p) - loss(m)) / (2 * h)) << "mean " << i << "," << k;
                p = cloud;
                m = cloud;
                p.log_scales[i][k] += h;
                m.log_scales[i][k] -= h;
                EXPECT_PRED2(fd_close, g.log_scales[i][k], (loss(p) - loss(m)) / (2 * h)) << "scale " << i;
                p = cloud;
                m = cloud;
                p.sh_of(i)[k] += h;
                m.sh_of(i)[k] -= h;
                EXPECT_PRED2(fd_close, g.sh_dc[i][k], (loss(p) - loss(m)) / (2 * h)) << "dc " << i;
            }
            GaussianCloud p = cloud, m = cloud;
            p.opacity_logits[i] += h;
            m.opacity_logits[i] -= h;
            EXPECT_PRED2(fd_close, g.opacity_logits[i], (loss(p) - loss(m)) / (2 * h)) << "opacity " << i;
        }
    }
}

TEST(Backward, ClampedColorChannelGetsNoGradient) {
    GaussianCloud cloud;
    cloud.push_back({2, 0, 0}, Eigen::Vector3d::Constant(std::log(0.3)), Eigen::Quaterniond::Identity(), 0.0,
                    {-0.5, 0.5, 0.5});
    Image weights(16, 16, 1.0);
    const auto g = render_backward(cloud, axis_camera(), weights);
    EXPECT_EQ(g.sh_dc[0][0], 0.0);
    EXPECT_GT(g.sh_dc[0][1], 0.0);
}
