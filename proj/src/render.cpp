#include "dreamscene/render.hpp"

#include "dreamscene/error.hpp"
#include "dreamscene/parallel.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

namespace dreamscene {

namespace {

struct Bins {
    int tiles_x = 0;
    int tiles_y = 0;
    std::vector<std::vector<std::uint32_t>> lists; // positions into the sorted splat array
};

Bins bin_splats(const std::vector<Splat2D>& splats, int width, int height) {
    Bins bins;
    bins.tiles_x = (width + kTileSize - 1) / kTileSize;
    bins.tiles_y = (height + kTileSize - 1) / kTileSize;
    bins.lists.resize(std::size_t(bins.tiles_x) * bins.tiles_y);
    for (std::size_t s = 0; s < splats.size(); ++s) {
        const auto& sp = splats[s];
        // Pixel centers (i + 0.5) inside [mean - r, mean + r].
        const int x0 = std::max(0, int(std::ceil(sp.mean.x() - sp.radius - 0.5)));
        const int x1 = std::min(width - 1, int(std::floor(sp.mean.x() + sp.radius - 0.5)));
        const int y0 = std::max(0, int(std::ceil(sp.mean.y() - sp.radius - 0.5)));
        const int y1 = std::min(height - 1, int(std::floor(sp.mean.y() + sp.radius - 0.5)));
        if (x0 > x1 || y0 > y1) continue;
        for (int ty = y0 / kTileSize; ty <= y1 / kTileSize; ++ty)
            for (int tx = x0 / kTileSize; tx <= x1 / kTileSize; ++tx)
                bins.lists[std::size_t(ty) * bins.tiles_x + tx].push_back(std::uint32_t(s));
    }
    return bins;
}

struct Contribution {
    std::uint32_t slot;   // position in the candidate list being traversed
    double alpha;
    double falloff;       // exp(-q/2)
    bool clamped;
    double transmittance; // T before this splat
    Eigen::Vector2d delta;
};

// Front-to-back compositing over a candidate list already in depth order.
template <typename Candidates, typename Visit>
double composite_pixel(const std::vector<Splat2D>& splats, const Candidates& candidates, const Eigen::Vector2d& pixel,
                       Visit&& visit) {
    double transmittance = 1.0;
    for (std::uint32_t slot = 0; slot < std::uint32_t(candidates.size()); ++slot) {
        if (transmittance < kTransmittanceCutoff) break;
        const Splat2D& sp = splats[candidates[slot]];
        double power = 0.0;
        if (!splat_covers(sp, pixel, power)) continue;
        const double falloff = std::exp(-0.5 * power);
        const double raw = sp.alpha_peak * falloff;
        const bool clamped = raw > kAlphaClamp;
        const double alpha = clamped ? kAlphaClamp : raw;
        visit(Contribution{slot, alpha, falloff, clamped, transmittance, pixel - sp.mean}, sp);
        transmittance *= (1.0 - alpha);
    }
    return transmittance;
}

struct AllSplats {
    std::size_t n;
    std::size_t size() const { return n; }
    std::uint32_t operator[](std::uint32_t i) const { return i; }
};

struct ListView {
    const std::vector<std::uint32_t>* list;
    std::size_t size() const { return list->size(); }
    std::uint32_t operator[](std::uint32_t i) const { return (*list)[i]; }
};

struct PixelForward {
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    double weight = 0.0;
    double weighted_depth = 0.0;
};

template <typename Candidates>
void shade_pixel(const std::vector<Splat2D>& splats, const Candidates& candidates, int x, int y,
                 const Camera& camera, const RenderOptions& options, RenderOutput& out) {
    PixelForward acc;
    const double t_final = composite_pixel(splats, candidates, Eigen::Vector2d(x + 0.5, y + 0.5),
                                           [&](const Contribution& c, const Splat2D& sp) {
                                               const double w = c.alpha * c.transmittance;
                                               acc.color += w * sp.rgb;
                                               acc.weight += w;
                                               acc.weighted_depth += w * sp.depth;
                                           });
    acc.color += t_final * options.background;
    out.color.set_rgb(x, y, acc.color);
    out.alpha.at(x, y) = 1.0 - t_final;
    out.depth.at(x, y) = acc.weight > 0.0 ? acc.weighted_depth / acc.weight : camera.far;
}

// Per-splat adjoints in screen space.
struct ScreenGrad {
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    double conic_xx = 0.0, conic_xy = 0.0, conic_yy = 0.0;
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    double opacity = 0.0;

    ScreenGrad& operator+=(const ScreenGrad& o) {
        mean += o.mean;
        conic_xx += o.conic_xx;
        conic_xy += o.conic_xy;
        conic_yy += o.conic_yy;
        color += o.color;
        opacity += o.opacity;
        return *this;
    }
};

template <typename Candidates>
void backprop_pixel(const std::vector<Splat2D>& splats, const Candidates& candidates, int x, int y,
                    const Eigen::Vector3d& grad, const RenderOptions& options, std::vector<Contribution>& scratch,
                    std::vector<ScreenGrad>& local) {
    if (grad.isZero(0.0)) return;
    scratch.clear();
    const double t_final = composite_pixel(splats, candidates, Eigen::Vector2d(x + 0.5, y + 0.5),
                                           [&](const Contribution& c, const Splat2D&) { scratch.push_back(c); });
    // behind = (color accumulated behind the current splat) . grad
    double behind = t_final * options.background.dot(grad);
    for (auto it = scratch.rbegin(); it != scratch.rend(); ++it) {
        const Contribution& c = *it;
        const Splat2D& sp = splats[candidates[c.slot]];
        const double cg = sp.rgb.dot(grad);
        const double dl_dalpha = c.transmittance * cg - behind / (1.0 - c.alpha);
        behind += c.alpha * c.transmittance * cg;

        ScreenGrad& g = local[c.slot];
        g.color += (c.alpha * c.transmittance) * grad;
        if (c.clamped) continue;
        g.opacity += dl_dalpha * c.falloff;
        const double dl_dpower = dl_dalpha * (-0.5 * c.alpha);
        g.mean += dl_dpower * (-2.0 * (sp.conic * c.delta));
        g.conic_xx += dl_dpower * c.delta.x() * c.delta.x();
        g.conic_xy += dl_dpower * c.delta.x() * c.delta.y();
        g.conic_yy += dl_dpower * c.delta.y() * c.delta.y();
    }
}

} // namespace

bool splat_covers(const Splat2D& splat, const Eigen::Vector2d& pixel, double& power) {
    const Eigen::Vector2d d = pixel - splat.mean;
    power = splat.conic(0, 0) * d.x() * d.x() + 2.0 * splat.conic(0, 1) * d.x() * d.y() +
            splat.conic(1, 1) * d.y() * d.y();
    return power >= 0.0 && power <= kFootprintPower;
}

std::vector<Splat2D> project(const GaussianCloud& cloud, const Camera& camera) {
    camera.validate();
    cloud.validate();
    const Eigen::Matrix3d w2c = camera.world_to_camera();
    const double f = camera.focal();
    const double cx = camera.cx(), cy = camera.cy();
    std::vector<Splat2D> splats;
    splats.reserve(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Eigen::Vector3d t = w2c * (cloud.means[i] - camera.position);
        if (!(t.z() > camera.near) || !(t.z() < camera.far)) continue;
        const Eigen::Matrix3d sigma = covariance_from(cloud.log_scales[i], cloud.rotations[i]);
        const Eigen::Matrix3d m = w2c * sigma * w2c.transpose();
        Eigen::Matrix<double, 2, 3> j;
        j << f / t.z(), 0.0, -f * t.x() / (t.z() * t.z()), 0.0, f / t.z(), -f * t.y() / (t.z() * t.z());
        const Eigen::Matrix2d cov = j * m * j.transpose();
        const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
        if (!(det > 0.0) || !std::isfinite(det)) continue;
        const double half_trace = 0.5 * (cov(0, 0) + cov(1, 1));
        const double lambda_max = half_trace + std::sqrt(std::max(0.0, half_trace * half_trace - det));
        const double radius = 3.0 * std::sqrt(lambda_max);
        const Eigen::Vector2d mean(f * t.x() / t.z() + cx, f * t.y() / t.z() + cy);
        if (mean.x() + radius < 0.0 || mean.x() - radius > camera.width || mean.y() + radius < 0.0 ||
            mean.y() - radius > camera.height) {
            continue;
        }
        Splat2D sp;
        sp.index = i;
        sp.mean = mean;
        sp.cov = cov;
        sp.conic << cov(1, 1) / det, -cov(0, 1) / det, -cov(1, 0) / det, cov(0, 0) / det;
        sp.depth = t.z();
        sp.cam_pos = t;
        const auto coeffs = cloud.sh_of(i);
        if (cloud.sh_degree == 0) {
            sp.rgb_unclamped = Eigen::Vector3d(sh_dc_to_rgb(coeffs[0]), sh_dc_to_rgb(coeffs[1]), sh_dc_to_rgb(coeffs[2]));
        } else {
            const Eigen::Vector3d dir = (cloud.means[i] - camera.position).normalized();
            sp.rgb_unclamped = eval_sh_color(cloud.sh_degree, coeffs, dir).array() + 0.5;
        }
        sp.rgb = sp.rgb_unclamped.cwiseMax(0.0);
        sp.alpha_peak = cloud.opacity(i);
        sp.radius = radius;
        splats.push_back(sp);
    }
    std::sort(splats.begin(), splats.end(), [](const Splat2D& a, const Splat2D& b) {
        return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
    });
    return splats;
}

RenderOutput render_forward(const GaussianCloud& cloud, const Camera& camera, const RenderOptions& options) {
    const std::vector<Splat2D> splats = project(cloud, camera);
    RenderOutput out{Image(camera.width, camera.height), Plane(camera.width, camera.height),
                     Plane(camera.width, camera.height)};
    if (options.tiled) {
        const Bins bins = bin_splats(splats, camera.width, camera.height);
        parallel_for(bins.lists.size(), options.workers, [&](std::size_t tile) {
            const int tx = int(tile % bins.tiles_x), ty = int(tile / bins.tiles_x);
            const ListView view{&bins.lists[tile]};
            for (int y = ty * kTileSize; y < std::min(camera.height, (ty + 1) * kTileSize); ++y)
                for (int x = tx * kTileSize; x < std::min(camera.width, (tx + 1) * kTileSize); ++x)
                    shade_pixel(splats, view, x, y, camera, options, out);
        });
    } else {
        const AllSplats all{splats.size()};
        parallel_for(std::size_t(camera.height), options.workers, [&](std::size_t row) {
            for (int x = 0; x < camera.width; ++x) shade_pixel(splats, all, x, int(row), camera, options, out);
        });
    }
    return out;
}

ParamGrads::ParamGrads(std::size_t n)
    : means(n, Eigen::Vector3d::Zero()), log_scales(n, Eigen::Vector3d::Zero()), opacity_logits(n, 0.0),
      sh_dc(n, Eigen::Vector3d::Zero()), mean2d_norm(n, 0.0) {}

void ParamGrads::zero_rows(std::span<const std::uint8_t> mask) {
    for (std::size_t i = 0; i < size() && i < mask.size(); ++i) {
        if (!mask[i]) continue;
        means[i].setZero();
        log_scales[i].setZero();
        opacity_logits[i] = 0.0;
        sh_dc[i].setZero();
        mean2d_norm[i] = 0.0;
    }
}

ParamGrads& ParamGrads::operator+=(const ParamGrads& o) {
    if (o.size() != size()) throw ValidationError("ParamGrads size mismatch");
    for (std::size_t i = 0; i < size(); ++i) {
        means[i] += o.means[i];
        log_scales[i] += o.log_scales[i];
        opacity_logits[i] += o.opacity_logits[i];
        sh_dc[i] += o.sh_dc[i];
        mean2d_norm[i] += o.mean2d_norm[i];
    }
    return *this;
}

ParamGrads& ParamGrads::operator*=(double s) {
    for (std::size_t i = 0; i < size(); ++i) {
        means[i] *= s;
        log_scales[i] *= s;
        opacity_logits[i] *= s;
        sh_dc[i] *= s;
        mean2d_norm[i] *= std::abs(s);
    }
    return *this;
}

bool ParamGrads::all_finite() const {
    for (std::size_t i = 0; i < size(); ++i) {
        if (!means[i].allFinite() || !log_scales[i].allFinite() || !std::isfinite(opacity_logits[i]) ||
            !sh_dc[i].allFinite()) {
            return false;
        }
    }
    return true;
}

ParamGrads render_backward(const GaussianCloud& cloud, const Camera& camera, const Image& dloss_dcolor,
                           const RenderOptions& options) {
    if (dloss_dcolor.width != camera.width || dloss_dcolor.height != camera.height) {
        throw ValidationError("render_backward: adjoint image is " + std::to_string(dloss_dcolor.width) + "x" +
                              std::to_string(dloss_dcolor.height) + ", camera renders " +
                              std::to_string(camera.width) + "x" + std::to_string(camera.height));
    }
    const std::vector<Splat2D> splats = project(cloud, camera);
    ParamGrads grads(cloud.size());
    if (splats.empty()) return grads;

    // Screen-space adjoints are accumulated per work item and reduced in a
    // fixed item order, so results do not depend on the worker count.
    std::vector<ScreenGrad> screen(splats.size());
    if (options.tiled) {
        const Bins bins = bin_splats(splats, camera.width, camera.height);
        std::vector<std::vector<ScreenGrad>> per_tile(bins.lists.size());
        parallel_for(bins.lists.size(), options.workers, [&](std::size_t tile) {
            const auto& list = bins.lists[tile];
            if (list.empty()) return;
            per_tile[tile].assign(list.size(), ScreenGrad{});
            const int tx = int(tile % bins.tiles_x), ty = int(tile / bins.tiles_x);
            const ListView view{&list};
            std::vector<Contribution> scratch;
            for (int y = ty * kTileSize; y < std::min(camera.height, (ty + 1) * kTileSize); ++y)
                for (int x = tx * kTileSize; x < std::min(camera.width, (tx + 1) * kTileSize); ++x)
                    backprop_pixel(splats, view, x, y, dloss_dcolor.rgb(x, y), options, scratch, per_tile[tile]);
        });
        for (std::size_t tile = 0; tile < bins.lists.size(); ++tile) {
            const auto& list = bins.lists[tile];
            for (std::size_t k = 0; k < per_tile[tile].size(); ++k) screen[list[k]] += per_tile[tile][k];
        }
    } else {
        const AllSplats all{splats.size()};
        std::vector<Contribution> scratch;
        for (int y = 0; y < camera.height; ++y)
            for (int x = 0; x < camera.width; ++x)
                backprop_pixel(splats, all, x, y, dloss_dcolor.rgb(x, y), options, scratch, screen);
    }

    const Eigen::Matrix3d w2c = camera.world_to_camera();
    const double f = camera.focal();
    for (std::size_t s = 0; s < splats.size(); ++s) {
        const Splat2D& sp = splats[s];
        const ScreenGrad& g = screen[s];
        const std::size_t i = sp.index;

        for (int c = 0; c < 3; ++c) {
            grads.sh_dc[i][c] = sp.rgb_unclamped[c] < 0.0 ? 0.0 : g.color[c] * kShC0;
        }
        const double o = sp.alpha_peak;
        grads.opacity_logits[i] = g.opacity * o * (1.0 - o);
        grads.mean2d_norm[i] = g.mean.norm();

        // conic = cov^-1  =>  dL/dcov = -conic * dL/dconic * conic
        Eigen::Matrix2d dconic;
        dconic << g.conic_xx, g.conic_xy, g.conic_xy, g.conic_yy;
        const Eigen::Matrix2d dcov = -sp.conic * dconic * sp.conic;

        const Eigen::Vector3d& t = sp.cam_pos;
        const double iz = 1.0 / t.z(), iz2 = iz * iz, iz3 = iz2 * iz;
        Eigen::Matrix<double, 2, 3> j;
        j << f * iz, 0.0, -f * t.x() * iz2, 0.0, f * iz, -f * t.y() * iz2;
        const Eigen::Matrix3d sigma = covariance_from(cloud.log_scales[i], cloud.rotations[i]);
        const Eigen::Matrix3d m = w2c * sigma * w2c.transpose();
        const Eigen::Matrix<double, 2, 3> dj = 2.0 * dcov * j * m;
        const Eigen::Matrix3d dm = j.transpose() * dcov * j;

        Eigen::Vector3d dt;
        dt.x() = g.mean.x() * f * iz + dj(0, 2) * (-f * iz2);
        dt.y() = g.mean.y() * f * iz + dj(1, 2) * (-f * iz2);
        dt.z() = g.mean.x() * (-f * t.x() * iz2) + g.mean.y() * (-f * t.y() * iz2) + dj(0, 0) * (-f * iz2) +
                 dj(1, 1) * (-f * iz2) + dj(0, 2) * (2.0 * f * t.x() * iz3) + dj(1, 2) * (2.0 * f * t.y() * iz3);
        grads.means[i] = w2c.transpose() * dt;

        if (options.scale_gradients) {
            const Eigen::Matrix3d dsigma = w2c.transpose() * dm * w2c;
            const Eigen::Matrix3d r = cloud.rotations[i].toRotationMatrix();
            for (int k = 0; k < 3; ++k) {
                const double s2 = std::exp(2.0 * cloud.log_scales[i][k]);
                grads.log_scales[i][k] = 2.0 * s2 * r.col(k).dot(dsigma * r.col(k));
            }
        }
    }
    return grads;
}

} // namespace dreamscene
