#pragma once

#include "dreamscene/camera.hpp"
#include "dreamscene/gaussian_cloud.hpp"
#include "dreamscene/guidance.hpp"
#include "dreamscene/optimizer.hpp"
#include "dreamscene/render.hpp"

#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace dreamscene {

using Rng = std::mt19937_64;

/// max(1, m0 - floor(iter / period)).
int m_schedule(int iter, int m0 = 4, int period = 400);

struct TimestepPlan {
    int iter = 0;
    int t_end = 0;
    int m = 0;
    /// Ascending; samples[i-1] lies in (t_end (i-1)/m, t_end i/m], and is at least 1.
    std::vector<int> samples;
};

/// Window end for an iteration: max(1, round((1 - iter/max_iter) T)).
int window_end(int iter, int max_iter, int T);

TimestepPlan plan_timesteps(int iter, int max_iter, int T, int m, Rng& rng);

/// CSV rows iter,T_end,m,t_1..t_mmax; unused columns are left empty.
void write_plan_csv(std::span<const TimestepPlan> plans, std::ostream& out);

using WeightFn = std::function<double(int)>;
WeightFn constant_weight(double value = 1.0);

/// Standard-normal image drawn row-major from `rng`.
Image draw_noise(Rng& rng, int width, int height);

enum class ChainMode { ddim, independent };

struct MtsOptions {
    ChainMode chain = ChainMode::ddim;
    WeightFn weight = constant_weight();
    DdimOptions ddim;
    /// Condition used while walking the DDIM chain (unconditional by default).
    Condition inversion_condition = std::nullopt;
    RenderOptions render;
};

struct MtsResult {
    ParamGrads grads;
    /// sum_i w(t_i) (eps(x_ti; y) - eps(x_ti; null)), the adjoint fed to the rasterizer.
    Image residual;
    RenderOutput rendered;
};

/// Single-timestep CSD gradient with an explicit noise draw.
MtsResult csd_gradient(const GaussianCloud& cloud, const Camera& camera, const GuidanceModel& model,
                       const std::string& condition, int t, const Image& noise, const MtsOptions& options = {});

/// Multi-timestep CSD gradient. In independent mode each x_ti is noised
/// from the render with a fresh draw from `rng` (in plan order); in DDIM mode
/// x_ti is inverted from x_t(i-1), starting at the render, and `rng` is unused.
MtsResult mts_gradient(const GaussianCloud& cloud, const Camera& camera, const GuidanceModel& model,
                       const std::string& condition, const TimestepPlan& plan, Rng& rng,
                       const MtsOptions& options = {});

/// Alpha below which a footprint does not count as touching a ray.
inline constexpr double kParticipationAlpha = 1.0 / 255.0;

/// Ray-contribution score per Gaussian: over every pixel ray of every camera,
/// participants add V / (D^2 maxV) where D is the camera depth (clamped at the
/// near plane) and maxV the largest participant volume on that ray.
/// Contributions are summed camera by camera in raster order, so the result
/// does not depend on `workers`.
std::vector<double> filter_scores(const GaussianCloud& cloud, std::span<const Camera> cameras, int workers = 1);

struct FilterReport {
    std::vector<double> scores;
    std::vector<std::size_t> kept_indices;
    std::size_t removed_count = 0;
    double compression_ratio = 0.0;
};

/// Removes floor(gamma N) lowest-scoring Gaussians, lower index first on
/// ties. Rows flagged in `protect` are never removed and do not count in N.
std::pair<GaussianCloud, FilterReport> filter_prune(const GaussianCloud& cloud, std::span<const double> scores,
                                                    double gamma, std::span<const std::uint8_t> protect = {});

/// CSV rows index,score,kept.
void write_filter_csv(const FilterReport& report, std::ostream& out);

struct ReconstructionOptions {
    int t_small = 200;
    int steps = 200;
    AdamConfig adam{LearningRates{1.6e-4, 5e-2, 1e-2, 5e-3}};
    RenderOptions render;
    /// Views whose residual norm is at or below this contribute no gradient.
    double residual_floor = 1e-9;
};

struct ReconstructionResult {
    GaussianCloud cloud;
    std::vector<Image> targets;
    std::vector<double> loss_curve; ///< loss before each step, then the final loss
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

/// Sum over views of the L2 norm of (render - target).
double reconstruction_loss(const GaussianCloud& cloud, std::span<const Camera> cameras,
                           std::span<const Image> targets, const RenderOptions& render = {});

/// Fits the cloud to one-shot pseudo-GT targets at a small timestep.
ReconstructionResult reconstructive_generation(const GaussianCloud& cloud, std::span<const Camera> cameras,
                                               const GuidanceModel& model, const std::string& condition, Rng& rng,
                                               const ReconstructionOptions& options = {});

} // namespace dreamscene
