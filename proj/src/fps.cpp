#include "dreamscene/fps.hpp"

#include "dreamscene/error.hpp"
#include "dreamscene/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>

namespace dreamscene {

int m_schedule(int iter, int m0, int period) {
    if (iter < 0) throw ValidationError("m_schedule: iter must be >= 0");
    if (period < 1) throw ValidationError("m_schedule: period must be >= 1");
    return std::max(1, m0 - iter / period);
}

int window_end(int iter, int max_iter, int T) {
    if (max_iter <= 0) throw ValidationError("plan_timesteps: max_iter must be positive");
    if (iter < 0 || iter > max_iter) throw ValidationError("plan_timesteps: iter outside [0, max_iter]");
    return std::max(1, int(std::lround((1.0 - double(iter) / max_iter) * T)));
}

TimestepPlan plan_timesteps(int iter, int max_iter, int T, int m, Rng& rng) {
    if (m < 1) throw ValidationError("plan_timesteps: m must be >= 1");
    TimestepPlan plan;
    plan.iter = iter;
    plan.t_end = window_end(iter, max_iter, T);
    plan.m = m;
    for (int i = 1; i <= m; ++i) {
        // Integers in (lo, hi]; long long keeps t_end * i exact.
        const long long num_lo = (long long)plan.t_end * (i - 1), num_hi = (long long)plan.t_end * i;
        const long long first = num_lo / m + 1;
        const long long last = num_hi / m;
        int t;
        if (first <= last) {
            std::uniform_int_distribution<long long> pick(first, last);
            t = int(pick(rng));
        } else {
            // Window narrower than m: no integer inside, take the ceiling of the upper bound.
            t = int((num_hi + m - 1) / m);
        }
        plan.samples.push_back(std::max(1, t));
    }
    return plan;
}

void write_plan_csv(std::span<const TimestepPlan> plans, std::ostream& out) {
    int width = 0;
    for (const auto& p : plans) width = std::max(width, p.m);
    out << "iter,T_end,m";
    for (int i = 1; i <= width; ++i) out << ",t_" << i;
    out << '\n';
    for (const auto& p : plans) {
        out << p.iter << ',' << p.t_end << ',' << p.m;
        for (int i = 0; i < width; ++i) {
            out << ',';
            if (i < int(p.samples.size())) out << p.samples[i];
        }
        out << '\n';
    }
}

WeightFn constant_weight(double value) {
    if (!(value >= 0.0) || !std::isfinite(value)) throw ValidationError("weight must be finite and >= 0");
    return [value](int) { return value; };
}

Image draw_noise(Rng& rng, int width, int height) {
    std::normal_distribution<double> n(0.0, 1.0);
    Image img(width, height);
    for (auto& v : img.data) v = n(rng);
    return img;
}

namespace {

void accumulate_residual(Image& acc, const Image& x_t, int t, const std::string& condition,
                         const GuidanceModel& model, const MtsOptions& options) {
    const double w = options.weight(t);
    if (!(w >= 0.0) || !std::isfinite(w)) throw NumericError("weight function returned " + std::to_string(w));
    const Image r = csd_residual(x_t, t, condition, model);
    for (std::size_t k = 0; k < acc.data.size(); ++k) acc.data[k] += w * r.data[k];
}

} // namespace

MtsResult csd_gradient(const GaussianCloud& cloud, const Camera& camera, const GuidanceModel& model,
                       const std::string& condition, int t, const Image& noise, const MtsOptions& options) {
    RenderOutput rendered = render_forward(cloud, camera, options.render);
    Image residual(camera.width, camera.height);
    accumulate_residual(residual, add_noise(rendered.color, t, noise, model.schedule()), t, condition, model, options);
    ParamGrads grads = render_backward(cloud, camera, residual, options.render);
    return {std::move(grads), std::move(residual), std::move(rendered)};
}

MtsResult mts_gradient(const GaussianCloud& cloud, const Camera& camera, const GuidanceModel& model,
                       const std::string& condition, const TimestepPlan& plan, Rng& rng, const MtsOptions& options) {
    if (plan.samples.empty()) throw ValidationError("mts_gradient: empty timestep plan");
    RenderOutput rendered = render_forward(cloud, camera, options.render);
    Image residual(camera.width, camera.height);
    Image x = rendered.color;
    int t_prev = 0;
    for (int t : plan.samples) {
        if (options.chain == ChainMode::independent) {
            x = add_noise(rendered.color, t, draw_noise(rng, camera.width, camera.height), model.schedule());
        } else {
            x = ddim_invert(x, t_prev, t, options.inversion_condition, model, options.ddim);
            t_prev = t;
        }
        accumulate_residual(residual, x, t, condition, model, options);
    }
    ParamGrads grads = render_backward(cloud, camera, residual, options.render);
    return {std::move(grads), std::move(residual), std::move(rendered)};
}

std::vector<double> filter_scores(const GaussianCloud& cloud, std::span<const Camera> cameras, int workers) {
    if (cameras.empty()) throw ValidationError("filter_scores needs at least one camera");
    std::vector<double> scores(cloud.size(), 0.0);
    std::vector<double> volume(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) volume[i] = volume_of(cloud, i);

    struct Hit {
        std::uint32_t splat;
        double contribution;
    };
    for (const Camera& camera : cameras) {
        std::vector<Splat2D> splats = project(cloud, camera);
        // Participants are visited in cloud-index order.
        std::sort(splats.begin(), splats.end(), [](const Splat2D& a, const Splat2D& b) { return a.index < b.index; });
        std::vector<std::vector<std::uint32_t>> rows(std::size_t(camera.height));
        for (std::uint32_t s = 0; s < splats.size(); ++s) {
            const auto& sp = splats[s];
            const int y0 = std::max(0, int(std::ceil(sp.mean.y() - sp.radius - 0.5)));
            const int y1 = std::min(camera.height - 1, int(std::floor(sp.mean.y() + sp.radius - 0.5)));
            for (int y = y0; y <= y1; ++y) rows[std::size_t(y)].push_back(s);
        }
        std::vector<std::vector<Hit>> hits(rows.size());
        parallel_for(rows.size(), workers, [&](std::size_t y) {
            std::vector<std::uint32_t> on_ray;
            for (int x = 0; x < camera.width; ++x) {
                const Eigen::Vector2d pixel(x + 0.5, double(y) + 0.5);
                on_ray.clear();
                double max_volume = 0.0;
                for (std::uint32_t s : rows[y]) {
                    const Splat2D& sp = splats[s];
                    double power = 0.0;
                    if (!splat_covers(sp, pixel, power)) continue;
                    const double alpha = std::min(kAlphaClamp, sp.alpha_peak * std::exp(-0.5 * power));
                    if (alpha < kParticipationAlpha) continue;
                    on_ray.push_back(s);
                    max_volume = std::max(max_volume, volume[sp.index]);
                }
                for (std::uint32_t s : on_ray) {
                    const double d = std::max(splats[s].depth, camera.near);
                    hits[y].push_back({s, volume[splats[s].index] / (d * d * max_volume)});
                }
            }
        });
        for (const auto& row : hits)
            for (const Hit& h : row) scores[splats[h.splat].index] += h.contribution;
    }
    return scores;
}

std::pair<GaussianCloud, FilterReport> filter_prune(const GaussianCloud& cloud, std::span<const double> scores,
                                                    double gamma, std::span<const std::uint8_t> protect) {
    if (scores.size() != cloud.size()) throw ValidationError("filter_prune: scores not aligned with cloud");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ValidationError("filter_prune: gamma must be in [0, 1)");
    if (!protect.empty() && protect.size() != cloud.size()) {
        throw ValidationError("filter_prune: protect mask not aligned with cloud");
    }
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < cloud.size(); ++i)
        if (protect.empty() || !protect[i]) candidates.push_back(i);
    // Small slack so e.g. 0.6 * 10 counts as 6 despite binary rounding.
    const std::size_t remove = std::size_t(std::floor(gamma * double(candidates.size()) + 1e-9));
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<std::uint8_t> removed(cloud.size(), 0);
    for (std::size_t k = 0; k < remove; ++k) removed[candidates[k]] = 1;

    FilterReport report;
    report.scores.assign(scores.begin(), scores.end());
    for (std::size_t i = 0; i < cloud.size(); ++i)
        if (!removed[i]) report.kept_indices.push_back(i);
    report.removed_count = remove;
    report.compression_ratio = cloud.empty() ? 0.0 : double(remove) / double(cloud.size());
    return {cloud.gather(report.kept_indices), std::move(report)};
}

void write_filter_csv(const FilterReport& report, std::ostream& out) {
    std::vector<std::uint8_t> kept(report.scores.size(), 0);
    for (std::size_t i : report.kept_indices) kept[i] = 1;
    out << "index,score,kept\n" << std::setprecision(17);
    for (std::size_t i = 0; i < report.scores.size(); ++i) {
        out << i << ',' << report.scores[i] << ',' << int(kept[i]) << '\n';
    }
}

double reconstruction_loss(const GaussianCloud& cloud, std::span<const Camera> cameras,
                           std::span<const Image> targets, const RenderOptions& render) {
    if (cameras.size() != targets.size()) throw ValidationError("reconstruction_loss: one target per camera needed");
    double loss = 0.0;
    for (std::size_t v = 0; v < cameras.size(); ++v) {
        loss += std::sqrt(squared_norm(render_forward(cloud, cameras[v], render).color - targets[v]));
    }
    return loss;
}

ReconstructionResult reconstructive_generation(const GaussianCloud& cloud, std::span<const Camera> cameras,
                                               const GuidanceModel& model, const std::string& condition, Rng& rng,
                                               const ReconstructionOptions& options) {
    if (cameras.empty()) throw ValidationError("reconstructive_generation needs at least one camera");
    if (options.t_small < 1 || options.t_small > 200) {
        throw ValidationError("reconstructive_generation: t_small must be in [1, 200]");
    }
    if (options.steps < 0) throw ValidationError("reconstructive_generation: steps must be >= 0");
    ReconstructionResult result;
    result.cloud = cloud;
    const int t = options.t_small;
    for (const Camera& cam : cameras) {
        const Image x0 = render_forward(cloud, cam, options.render).color;
        const Image x_t = add_noise(x0, t, draw_noise(rng, cam.width, cam.height), model.schedule());
        result.targets.push_back(pseudo_gt(x_t, t, model.predict_noise(x_t, t, condition), model.schedule()));
    }

    Adam adam(options.adam);
    for (int step = 0; step <= options.steps; ++step) {
        ParamGrads total(result.cloud.size());
        double loss = 0.0;
        for (std::size_t v = 0; v < cameras.size(); ++v) {
            Image diff = render_forward(result.cloud, cameras[v], options.render).color - result.targets[v];
            const double norm = std::sqrt(squared_norm(diff));
            loss += norm;
            if (step == options.steps || norm <= options.residual_floor) continue;
            diff *= 1.0 / norm;
            total += render_backward(result.cloud, cameras[v], diff, options.render);
        }
        if (!std::isfinite(loss)) throw NumericError("reconstructive_generation: non-finite loss at step " +
                                                     std::to_string(step));
        result.loss_curve.push_back(loss);
        if (step == options.steps) break;
        adam.step(result.cloud, total);
    }
    result.initial_loss = result.loss_curve.front();
    result.final_loss = result.loss_curve.back();
    return result;
}

} // namespace dreamscene
