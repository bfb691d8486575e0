#include "dreamscene/guidance.hpp"

#include "dreamscene/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

namespace dreamscene {

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ValidationError(std::string(what) + ": shape mismatch " + std::to_string(a.width) + "x" +
                              std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                              std::to_string(b.height));
    }
}

} // namespace

ScheduleKind parse_schedule_kind(const std::string& name) {
    if (name == "linear") return ScheduleKind::linear;
    if (name == "scaled_linear") return ScheduleKind::scaled_linear;
    throw ValidationError("unknown schedule kind '" + name + "'");
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::linear ? "linear" : "scaled_linear"; }

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t > T) throw ValidationError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    return t == 0 ? 1.0 : alpha_bars[std::size_t(t - 1)];
}

NoiseSchedule build_schedule(ScheduleKind kind, int T, double beta_start, double beta_end) {
    if (T < 1) throw ValidationError("schedule needs T >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
        throw ValidationError("schedule needs 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.kind = kind;
    s.T = T;
    s.betas.resize(std::size_t(T));
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : double(i) / double(T - 1);
        if (kind == ScheduleKind::linear) {
            s.betas[i] = beta_start + frac * (beta_end - beta_start);
        } else {
            const double r = std::sqrt(beta_start) + frac * (std::sqrt(beta_end) - std::sqrt(beta_start));
            s.betas[i] = r * r;
        }
    }
    s.alpha_bars.resize(std::size_t(T));
    double running = 1.0;
    for (int i = 0; i < T; ++i) {
        running *= 1.0 - s.betas[i];
        s.alpha_bars[i] = running;
    }
    return s;
}

void write_schedule_csv(const NoiseSchedule& schedule, std::ostream& out) {
    out << "t,beta,alpha_bar\n" << std::setprecision(17);
    for (int t = 1; t <= schedule.T; ++t) {
        out << t << ',' << schedule.betas[t - 1] << ',' << schedule.alpha_bars[t - 1] << '\n';
    }
}

Image add_noise(const Image& x0, double alpha_bar, const Image& eps) {
    require_same_shape(x0, eps, "add_noise");
    const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
    Image out(x0.width, x0.height);
    for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] = a * x0.data[k] + b * eps.data[k];
    return out;
}

Image add_noise(const Image& x0, int t, const Image& eps, const NoiseSchedule& schedule) {
    return add_noise(x0, schedule.alpha_bar(t), eps);
}

Image pseudo_gt(const Image& x_t, double alpha_bar, const Image& eps_hat) {
    require_same_shape(x_t, eps_hat, "pseudo_gt");
    if (!(alpha_bar > 0.0)) throw DegenerateError("pseudo_gt: alpha_bar is zero");
    const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
    Image out(x_t.width, x_t.height);
    for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] = (x_t.data[k] - b * eps_hat.data[k]) / a;
    return out;
}

Image pseudo_gt(const Image& x_t, int t, const Image& eps_hat, const NoiseSchedule& schedule) {
    return pseudo_gt(x_t, schedule.alpha_bar(t), eps_hat);
}

Image csd_residual(const Image& x_t, int t, const std::string& condition, const GuidanceModel& model) {
    return model.predict_noise(x_t, t, condition) - model.predict_noise(x_t, t, std::nullopt);
}

std::vector<int> ddim_grid(int t_from, int t_to, int substeps) {
    if (substeps < 1) throw ValidationError("ddim substeps must be >= 1");
    std::vector<int> grid{t_from};
    for (int k = 1; k <= substeps; ++k) {
        const int t = int(std::lround(t_from + double(t_to - t_from) * k / substeps));
        if (t != grid.back()) grid.push_back(t);
    }
    return grid;
}

namespace {

// x_to = sqrt(ab_to) x0_hat + sqrt(1 - ab_to) eps_hat, both predicted at t_eval.
Image reproject(const Image& x, int t_eval, double ab_to, const Condition& condition, const GuidanceModel& model) {
    const Image eps = model.predict_noise(x, t_eval, condition);
    const Image x0 = pseudo_gt(x, model.schedule().alpha_bar(t_eval), eps);
    const double a = std::sqrt(ab_to), b = std::sqrt(1.0 - ab_to);
    Image out(x.width, x.height);
    for (std::size_t k = 0; k < out.data.size(); ++k) out.data[k] = a * x0.data[k] + b * eps.data[k];
    return out;
}

// Finds y at t_hi such that reproject(y, t_hi -> t_lo) == x.
Image invert_hop_fixed_point(const Image& x, int t_lo, int t_hi, const Condition& condition,
                             const GuidanceModel& model, const DdimOptions& options) {
    const NoiseSchedule& s = model.schedule();
    const double ab_lo = s.alpha_bar(t_lo), ab_hi = s.alpha_bar(t_hi);
    const double ratio = std::sqrt(ab_hi / ab_lo);
    const double gain = std::sqrt(1.0 - ab_hi) - ratio * std::sqrt(1.0 - ab_lo);
    Image y = reproject(x, t_lo, ab_hi, condition, model); // explicit step as the starting guess
    for (int iter = 0; iter < options.max_fixed_point_iterations; ++iter) {
        const Image eps = model.predict_noise(y, t_hi, condition);
        double change = 0.0, scale = 0.0;
        for (std::size_t k = 0; k < y.data.size(); ++k) {
            const double next = ratio * x.data[k] + gain * eps.data[k];
            change = std::max(change, std::abs(next - y.data[k]));
            scale = std::max(scale, std::abs(next));
            y.data[k] = next;
        }
        if (!std::isfinite(change)) throw NumericError("ddim fixed-point inversion diverged");
        if (change <= options.fixed_point_tolerance * std::max(1.0, scale)) break;
    }
    return y;
}

} // namespace

Image ddim_invert(const Image& x, int t_from, int t_to, const Condition& condition, const GuidanceModel& model,
                  const DdimOptions& options) {
    if (t_to < t_from) throw ValidationError("ddim_invert needs t_to >= t_from");
    model.schedule().alpha_bar(t_to);
    model.schedule().alpha_bar(t_from);
    if (t_to == t_from) return x;
    const std::vector<int> grid = ddim_grid(t_from, t_to, options.substeps);
    Image cur = x;
    for (std::size_t k = 1; k < grid.size(); ++k) {
        if (options.mode == InversionMode::explicit_step) {
            cur = reproject(cur, grid[k - 1], model.schedule().alpha_bar(grid[k]), condition, model);
        } else {
            cur = invert_hop_fixed_point(cur, grid[k - 1], grid[k], condition, model, options);
        }
    }
    return cur;
}

Image ddim_sample(const Image& x, int t_from, int t_to, const Condition& condition, const GuidanceModel& model,
                  const DdimOptions& options) {
    if (t_to > t_from) throw ValidationError("ddim_sample needs t_to <= t_from");
    model.schedule().alpha_bar(t_to);
    model.schedule().alpha_bar(t_from);
    if (t_to == t_from) return x;
    // Same grid as the inversion over [t_to, t_from], walked backwards.
    std::vector<int> grid = ddim_grid(t_to, t_from, options.substeps);
    std::reverse(grid.begin(), grid.end());
    Image cur = x;
    for (std::size_t k = 1; k < grid.size(); ++k) {
        cur = reproject(cur, grid[k - 1], model.schedule().alpha_bar(grid[k]), condition, model);
    }
    return cur;
}

AnalyticGaussianGuidance::AnalyticGaussianGuidance(NoiseSchedule schedule, double sigma2)
    : schedule_(std::move(schedule)), sigma2_(sigma2) {
    if (!(sigma2 >= 0.0) || !std::isfinite(sigma2)) throw ValidationError("oracle sigma2 must be finite and >= 0");
}

void AnalyticGaussianGuidance::set_condition(const std::string& id, Image mean) {
    if (id.empty()) throw ValidationError("condition id must be non-empty");
    for (double v : mean.data)
        if (!std::isfinite(v)) throw ValidationError("condition '" + id + "' has non-finite mean");
    if (id == "null") {
        null_mean_ = std::move(mean);
        return;
    }
    means_[id] = std::move(mean);
}

void AnalyticGaussianGuidance::set_null(Image mean) { set_condition("null", std::move(mean)); }

std::vector<std::string> AnalyticGaussianGuidance::condition_ids() const {
    std::vector<std::string> ids;
    for (const auto& [id, _] : means_) ids.push_back(id);
    return ids;
}

Image AnalyticGaussianGuidance::mean_of(const Condition& condition, int width, int height) const {
    const Image* mean = nullptr;
    if (!condition) {
        if (!null_mean_) return Image(width, height, 0.5);
        mean = &*null_mean_;
    } else {
        const auto it = means_.find(*condition);
        if (it == means_.end()) throw ValidationError("unknown condition '" + *condition + "'");
        mean = &it->second;
    }
    if (mean->width != width || mean->height != height) {
        throw ValidationError("condition '" + condition.value_or("null") + "' is " + std::to_string(mean->width) + "x" +
                              std::to_string(mean->height) + ", requested " + std::to_string(width) + "x" +
                              std::to_string(height));
    }
    return *mean;
}

double AnalyticGaussianGuidance::shrinkage(int t) const {
    const double ab = schedule_.alpha_bar(t);
    const double denom = ab * sigma2_ + 1.0 - ab;
    return denom > 0.0 ? ab * sigma2_ / denom : 1.0;
}

double AnalyticGaussianGuidance::noise_gain(double ab) const {
    const double denom = ab * sigma2_ + 1.0 - ab;
    if (!(denom > 0.0)) throw DegenerateError("oracle noise prediction undefined at a clean timestep with sigma2 = 0");
    return std::sqrt(1.0 - ab) / denom;
}

Image AnalyticGaussianGuidance::posterior_mean(const Image& x_t, int t, const Condition& condition) const {
    const Image mu = mean_of(condition, x_t.width, x_t.height);
    const double ab = schedule_.alpha_bar(t), a = std::sqrt(ab), k = shrinkage(t);
    Image out(x_t.width, x_t.height);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = mu.data[i] + (k / a) * (x_t.data[i] - a * mu.data[i]);
    return out;
}

Image AnalyticGaussianGuidance::predict_noise(const Image& x_t, int t, const Condition& condition) const {
    const Image mu = mean_of(condition, x_t.width, x_t.height);
    const double ab = schedule_.alpha_bar(t), a = std::sqrt(ab), g = noise_gain(ab);
    Image out(x_t.width, x_t.height);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = g * (x_t.data[i] - a * mu.data[i]);
    return out;
}

Image AnalyticGaussianGuidance::closed_form_residual(int t, const std::string& condition, int width, int height) const {
    const double ab = schedule_.alpha_bar(t);
    const double factor = -std::sqrt(ab) * noise_gain(ab);
    return factor * (mean_of(condition, width, height) - mean_of(std::nullopt, width, height));
}

AnalyticGaussianGuidance AnalyticGaussianGuidance::load_directory(const std::filesystem::path& dir,
                                                                  NoiseSchedule schedule, double default_sigma2) {
    if (!std::filesystem::is_directory(dir)) throw IoError("oracle directory not found: " + dir.string());
    double sigma2 = default_sigma2;
    const auto meta = dir / "oracle.json";
    if (std::filesystem::exists(meta)) {
        std::ifstream in(meta);
        if (!in) throw IoError("cannot open " + meta.string());
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(meta.string() + ": " + e.what(), e.byte);
        }
        if (j.contains("sigma2")) {
            if (!j["sigma2"].is_number()) throw ParseError(meta.string() + ": sigma2 must be a number");
            sigma2 = j["sigma2"].get<double>();
        }
    }
    AnalyticGaussianGuidance model(std::move(schedule), sigma2);
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".ppm") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) model.set_condition(f.stem().string(), read_ppm(f));
    return model;
}

} // namespace dreamscene
