#include "dreamscene/error.hpp"
#include "dreamscene/guidance.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace dreamscene;

namespace {

Image random_image(std::mt19937_64& rng, int w, int h, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Image img(w, h);
    for (auto& v : img.data) v = u(rng);
    return img;
}

Image gaussian_image(std::mt19937_64& rng, int w, int h) {
    std::normal_distribution<double> n(0.0, 1.0);
    Image img(w, h);
    for (auto& v : img.data) v = n(rng);
    return img;
}

} // namespace

TEST(Schedule, SingleStep) {
    const auto s = build_schedule(ScheduleKind::linear, 1, 0.5, 0.5);
    ASSERT_EQ(s.alpha_bars.size(), 1u);
    EXPECT_EQ(s.alpha_bars[0], 0.5);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, LinearMatchesCumulativeProduct) {
    const auto s = build_schedule(ScheduleKind::linear, 1000, 1e-4, 2e-2);
    long double prod = 1.0L;
    for (int t = 1; t <= 1000; ++t) {
        const long double beta = 1e-4L + (2e-2L - 1e-4L) * (t - 1) / 999.0L;
        prod *= 1.0L - beta;
        EXPECT_NEAR(s.alpha_bar(t), double(prod), 1e-12);
        if (t > 1) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    }
    EXPECT_LT(s.alpha_bars.back(), 1e-4);
}

TEST(Schedule, ScaledLinearIsSquaredSqrtGrid) {
    const auto s = build_schedule(ScheduleKind::scaled_linear, 50, 0.00085, 0.012);
    const auto root = build_schedule(ScheduleKind::linear, 50, std::sqrt(0.00085), std::sqrt(0.012));
    for (int i = 0; i < 50; ++i) EXPECT_NEAR(s.betas[i], root.betas[i] * root.betas[i], 1e-15);
}

TEST(Schedule, RejectsBadBounds) {
    EXPECT_THROW(build_schedule(ScheduleKind::linear, 10, 0.0, 0.1), ValidationError);
    EXPECT_THROW(build_schedule(ScheduleKind::linear, 10, 0.2, 0.1), ValidationError);
    EXPECT_THROW(build_schedule(ScheduleKind::linear, 10, 0.1, 1.0), ValidationError);
    EXPECT_THROW(build_schedule(ScheduleKind::linear, 0), ValidationError);
    EXPECT_THROW(build_schedule(ScheduleKind::linear, 10).alpha_bar(11), ValidationError);
}

TEST(Schedule, CsvHasOneRowPerStep) {
    std::ostringstream out;
    write_schedule_csv(build_schedule(ScheduleKind::scaled_linear, 7), out);
    const std::string text = out.str();
    EXPECT_EQ(text.rfind("t,beta,alpha_bar\n", 0), 0u);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 8);
}

TEST(Noise, BoundaryCases) {
    std::mt19937_64 rng(1);
    const Image x0 = random_image(rng, 3, 2), eps = gaussian_image(rng, 3, 2);
    EXPECT_EQ(add_noise(x0, 1.0, eps).data, x0.data);
    EXPECT_EQ(add_noise(x0, 0.0, eps).data, eps.data);
    EXPECT_EQ(pseudo_gt(x0, 1.0, eps).data, x0.data);
    EXPECT_THROW(pseudo_gt(x0, 0.0, eps), DegenerateError);
    EXPECT_THROW(add_noise(x0, 0.5, Image(2, 2)), ValidationError);
}

TEST(Noise, MatchesFormulaAndInverts) {
    const auto s = build_schedule(ScheduleKind::scaled_linear);
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> pick(1, 1000);
    for (int trial = 0; trial < 200; ++trial) {
        const int t = pick(rng);
        const Image x0 = random_image(rng, 4, 4), eps = gaussian_image(rng, 4, 4);
        const Image xt = add_noise(x0, t, eps, s);
        const double ab = s.alpha_bars[t - 1];
        for (std::size_t k = 0; k < xt.data.size(); ++k) {
            EXPECT_NEAR(xt.data[k], std::sqrt(ab) * x0.data[k] + std::sqrt(1 - ab) * eps.data[k], 1e-12);
        }
        EXPECT_LE(max_abs_difference(pseudo_gt(xt, t, eps, s), x0), 1e-10);
    }
}

class OracleTest : public ::testing::Test {
protected:
    OracleTest() : model(build_schedule(ScheduleKind::scaled_linear), 0.01) {
        std::mt19937_64 rng(11);
        mu_y = random_image(rng, 4, 3, 0.1, 0.9);
        mu_null = random_image(rng, 4, 3, 0.1, 0.9);
        model.set_condition("scene", mu_y);
        model.set_null(mu_null);
    }
    AnalyticGaussianGuidance model;
    Image mu_y, mu_null;
};

TEST_F(OracleTest, UnknownConditionRejected) {
    EXPECT_THROW(model.predict_noise(mu_y, 10, std::string("missing")), ValidationError);
    EXPECT_THROW(model.predict_noise(Image(2, 2), 10, std::string("scene")), ValidationError);
}

TEST_F(OracleTest, GrayNullByDefault) {
    AnalyticGaussianGuidance bare(build_schedule(ScheduleKind::scaled_linear), 0.01);
    EXPECT_EQ(bare.mean_of(std::nullopt, 2, 2).data, Image(2, 2, 0.5).data);
}

TEST_F(OracleTest, PointMassData) {
    AnalyticGaussianGuidance point(build_schedule(ScheduleKind::scaled_linear), 0.0);
    point.set_condition("scene", mu_y);
    std::mt19937_64 rng(3);
    const Image eps = gaussian_image(rng, 4, 3);
    const Image xt = add_noise(mu_y, 300, eps, point.schedule());
    EXPECT_LE(max_abs_difference(point.posterior_mean(xt, 300, std::string("scene")), mu_y), 1e-15);
    EXPECT_LE(max_abs_difference(point.predict_noise(xt, 300, std::string("scene")), eps), 1e-12);
    EXPECT_THROW(point.predict_noise(mu_y, 0, std::string("scene")), DegenerateError);
}

TEST_F(OracleTest, BayesMeanIsFixedPoint) {
    for (int t : {1, 50, 400, 999}) {
        const Image xt = add_noise(mu_y, t, Image(4, 3), model.schedule());
        const Image eps = model.predict_noise(xt, t, std::string("scene"));
        EXPECT_LE(max_abs_difference(pseudo_gt(xt, t, eps, model.schedule()), mu_y), 1e-12);
    }
}

TEST_F(OracleTest, PosteriorIsConvexCombination) {
    std::mt19937_64 rng(4);
    for (int t : {5, 200, 800}) {
        const Image xt = random_image(rng, 4, 3, -2, 2);
        const Image post = model.posterior_mean(xt, t, std::string("scene"));
        const double a = std::sqrt(model.schedule().alpha_bar(t));
        for (std::size_t k = 0; k < xt.data.size(); ++k) {
            const double lo = std::min(xt.data[k] / a, mu_y.data[k]), hi = std::max(xt.data[k] / a, mu_y.data[k]);
            EXPECT_GE(post.data[k], lo - 1e-12);
            EXPECT_LE(post.data[k], hi + 1e-12);
        }
    }
}

TEST_F(OracleTest, ShrinkageMatchesMonteCarloRegression) {
    // k/sqrt(ab) is the regression slope of x0 on x_t for x0 ~ N(mu, s2).
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int t : {100, 500, 900}) {
        const double ab = model.schedule().alpha_bar(t);
        const int samples = 100000;
        double sx = 0, sy = 0, sxy = 0, syy = 0;
        for (int i = 0; i < samples; ++i) {
            const double x0 = 0.3 + std::sqrt(0.01) * n(rng);
            const double xt = std::sqrt(ab) * x0 + std::sqrt(1 - ab) * n(rng);
            sx += x0;
            sy += xt;
            sxy += x0 * xt;
            syy += xt * xt;
        }
        const double cov = sxy / samples - (sx / samples) * (sy / samples);
        const double var = syy / samples - (sy / samples) * (sy / samples);
        EXPECT_NEAR(std::sqrt(ab) * cov / var, model.shrinkage(t), 1e-2) << "t=" << t;
    }
}

TEST_F(OracleTest, ResidualMatchesClosedForm) {
    std::mt19937_64 rng(6);
    for (int t : {1, 10, 250, 600, 1000}) {
        const Image xt = random_image(rng, 4, 3, -1, 1);
        const Image r = csd_residual(xt, t, "scene", model);
        const double ab = model.schedule().alpha_bar(t), k = model.shrinkage(t);
        for (std::size_t i = 0; i < r.data.size(); ++i) {
            const double expected = -std::sqrt(ab) * (1 - k) / std::sqrt(1 - ab) * (mu_y.data[i] - mu_null.data[i]);
            EXPECT_NEAR(r.data[i], expected, 1e-10);
        }
        EXPECT_LE(max_abs_difference(model.closed_form_residual(t, "scene", 4, 3), r), 1e-12);
    }
}

TEST_F(OracleTest, ResidualVanishesForEqualMeans) {
    model.set_condition("same", mu_null);
    const Image r = csd_residual(mu_y, 123, "same", model);
    for (double v : r.data) EXPECT_EQ(v, 0.0);
}

TEST_F(OracleTest, InversionIdentityAndFixedPoint) {
    EXPECT_EQ(ddim_invert(mu_y, 30, 30, std::string("scene"), model).data, mu_y.data);
    EXPECT_THROW(ddim_invert(mu_y, 30, 10, std::string("scene"), model), ValidationError);
    Image x = mu_y;
    int t = 0;
    for (int next : {100, 300, 700}) {
        x = ddim_invert(x, t, next, std::string("scene"), model);
        t = next;
        const Image x0 = pseudo_gt(x, t, model.predict_noise(x, t, std::string("scene")), model.schedule());
        EXPECT_LE(max_abs_difference(x0, mu_y), 1e-12);
    }
}

TEST_F(OracleTest, FixedPointInversionRoundTrips) {
    std::mt19937_64 rng(8);
    DdimOptions opts;
    opts.substeps = 50;
    opts.mode = InversionMode::fixed_point;
    const Image x0 = random_image(rng, 4, 3);
    const Image noisy = ddim_invert(x0, 0, 600, std::string("scene"), model, opts);
    EXPECT_LE(max_abs_difference(ddim_sample(noisy, 600, 0, std::string("scene"), model, opts), x0), 1e-6);
}

TEST_F(OracleTest, ExplicitInversionRefinesWithSubsteps) {
    std::mt19937_64 rng(9);
    const Image x0 = random_image(rng, 4, 3);
    double previous = 1e300;
    for (int substeps : {10, 20, 40, 80}) {
        DdimOptions opts;
        opts.substeps = substeps;
        const Image noisy = ddim_invert(x0, 0, 600, std::string("scene"), model, opts);
        const double err = max_abs_difference(ddim_sample(noisy, 600, 0, std::string("scene"), model, opts), x0);
        EXPECT_LT(err, previous);
        previous = err;
    }
}

TEST(DdimGrid, Deduplicates) {
    EXPECT_EQ(ddim_grid(0, 3, 10), (std::vector<int>{0, 1, 2, 3}));
    EXPECT_EQ(ddim_grid(0, 600, 50).size(), 51u);
    EXPECT_EQ(ddim_grid(600, 0, 2), (std::vector<int>{600, 300, 0}));
}

TEST(OracleDirectory, LoadsMeansAndSigma) {
    const auto dir = std::filesystem::temp_directory_path() / "dreamscene_oracle_dir_test";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    write_ppm(Image(2, 2, Eigen::Vector3d(1.0, 0.0, 0.0)), dir / "red.ppm");
    write_ppm(Image(2, 2, 0.2), dir / "null.ppm");
    std::ofstream(dir / "oracle.json") << R"({"sigma2": 0.05})";
    const auto model = AnalyticGaussianGuidance::load_directory(dir, build_schedule(ScheduleKind::scaled_linear));
    EXPECT_EQ(model.sigma2(), 0.05);
    EXPECT_TRUE(model.has_condition("red"));
    EXPECT_EQ(model.condition_ids().size(), 1u);
    EXPECT_NEAR(model.mean_of(std::nullopt, 2, 2).data[0], 51.0 / 255.0, 1e-12);
    std::ofstream(dir / "oracle.json") << "{ nope";
    EXPECT_THROW(AnalyticGaussianGuidance::load_directory(dir, build_schedule(ScheduleKind::scaled_linear)),
                 ParseError);
    std::filesystem::remove_all(dir);
    EXPECT_THROW(AnalyticGaussianGuidance::load_directory(dir, build_schedule(ScheduleKind::scaled_linear)), IoError);
}
