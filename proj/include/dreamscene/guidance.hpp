#pragma once

#include "dreamscene/image.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace dreamscene {

enum class ScheduleKind { linear, scaled_linear };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

/// Discrete diffusion schedule. Timesteps run 1..T and alpha_bars[t-1] is the
/// signal retention at t; t = 0 is the clean boundary with alpha_bar = 1.
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::scaled_linear;
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alpha_bars;

    /// Throws ValidationError outside [0, T].
    double alpha_bar(int t) const;
};

NoiseSchedule build_schedule(ScheduleKind kind, int T = 1000, double beta_start = 0.00085, double beta_end = 0.012);

/// CSV with header t,beta,alpha_bar and one row per timestep 1..T.
void write_schedule_csv(const NoiseSchedule& schedule, std::ostream& out);

/// x_t = sqrt(ab) x0 + sqrt(1 - ab) eps.
Image add_noise(const Image& x0, double alpha_bar, const Image& eps);
Image add_noise(const Image& x0, int t, const Image& eps, const NoiseSchedule& schedule);

/// One-step clean estimate (x_t - sqrt(1 - ab) eps_hat) / sqrt(ab). Throws
/// DegenerateError when ab is zero.
Image pseudo_gt(const Image& x_t, double alpha_bar, const Image& eps_hat);
Image pseudo_gt(const Image& x_t, int t, const Image& eps_hat, const NoiseSchedule& schedule);

/// nullopt is the unconditional (null) prompt.
using Condition = std::optional<std::string>;

class GuidanceModel {
public:
    virtual ~GuidanceModel() = default;
    /// Must be deterministic and safe to call concurrently.
    virtual Image predict_noise(const Image& x_t, int t, const Condition& condition) const = 0;
    virtual const NoiseSchedule& schedule() const = 0;
};

/// eps(x_t; y, t) - eps(x_t; null, t).
Image csd_residual(const Image& x_t, int t, const std::string& condition, const GuidanceModel& model);

enum class InversionMode {
    /// Reprojection using the prediction at the lower timestep of each hop.
    explicit_step,
    /// Solves each hop so that the matching sampler step maps it back exactly.
    fixed_point,
};

struct DdimOptions {
    int substeps = 10;
    InversionMode mode = InversionMode::explicit_step;
    int max_fixed_point_iterations = 100;
    double fixed_point_tolerance = 1e-14;
};

/// Integer timestep grid from t_from to t_to in `substeps` near-equal hops,
/// duplicates removed. Works in either direction.
std::vector<int> ddim_grid(int t_from, int t_to, int substeps);

/// Deterministic noising x_{t_from} -> x_{t_to}, t_to >= t_from.
Image ddim_invert(const Image& x, int t_from, int t_to, const Condition& condition, const GuidanceModel& model,
                  const DdimOptions& options = {});

/// Deterministic denoising x_{t_from} -> x_{t_to}, t_to <= t_from.
Image ddim_sample(const Image& x, int t_from, int t_to, const Condition& condition, const GuidanceModel& model,
                  const DdimOptions& options = {});

/// Bayes-optimal denoiser for data x0 ~ N(mu_c, sigma2 I), one mean image per
/// condition. With k = ab s2 / (ab s2 + 1 - ab):
///   E[x0 | x_t] = mu + (k / sqrt(ab)) (x_t - sqrt(ab) mu)
///   eps_hat     = (1 - k)(x_t - sqrt(ab) mu) / sqrt(1 - ab)
/// The null condition is mid-gray unless a "null" mean is registered.
class AnalyticGaussianGuidance final : public GuidanceModel {
public:
    AnalyticGaussianGuidance(NoiseSchedule schedule, double sigma2);

    void set_condition(const std::string& id, Image mean);
    void set_null(Image mean);
    bool has_condition(const std::string& id) const { return means_.count(id) != 0; }
    std::vector<std::string> condition_ids() const;
    /// Mean for a condition at the given resolution (null falls back to gray).
    Image mean_of(const Condition& condition, int width, int height) const;
    double sigma2() const { return sigma2_; }

    double shrinkage(int t) const;
    Image posterior_mean(const Image& x_t, int t, const Condition& condition) const;
    Image predict_noise(const Image& x_t, int t, const Condition& condition) const override;
    const NoiseSchedule& schedule() const override { return schedule_; }

    /// The CSD residual in closed form; it does not depend on x_t.
    Image closed_form_residual(int t, const std::string& condition, int width, int height) const;

    /// Loads <id>.ppm files (null.ppm is the null mean) and an optional
    /// oracle.json {"sigma2": ...}.
    static AnalyticGaussianGuidance load_directory(const std::filesystem::path& dir, NoiseSchedule schedule,
                                                   double default_sigma2 = 0.01);

private:
    /// (1 - k) / sqrt(1 - ab), written to stay finite as ab -> 1.
    double noise_gain(double alpha_bar) const;

    NoiseSchedule schedule_;
    double sigma2_;
    std::map<std::string, Image> means_;
    std::optional<Image> null_mean_;
};

} // namespace dreamscene
