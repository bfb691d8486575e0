#include "dreamscene/gaussian_cloud.hpp"

#include "dreamscene/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>

namespace dreamscene {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double logit(double p) { return std::log(p / (1.0 - p)); }

double GaussianCloud::opacity(std::size_t i) const { return logistic(opacity_logits[i]); }

Eigen::Vector3d GaussianCloud::dc_rgb(std::size_t i) const {
    const double* c = sh.data() + i * sh_stride();
    return {sh_dc_to_rgb(c[0]), sh_dc_to_rgb(c[1]), sh_dc_to_rgb(c[2])};
}

void GaussianCloud::set_dc_rgb(std::size_t i, const Eigen::Vector3d& rgb) {
    double* c = sh.data() + i * sh_stride();
    for (int ch = 0; ch < 3; ++ch) c[ch] = rgb_to_sh_dc(rgb[ch]);
}

void GaussianCloud::push_back(const Eigen::Vector3d& mean, const Eigen::Vector3d& log_scale,
                              const Eigen::Quaterniond& rotation, double opacity_logit, const Eigen::Vector3d& rgb,
                              GaussianGroup group, bool is_frozen) {
    means.push_back(mean);
    log_scales.push_back(log_scale);
    rotations.push_back(rotation);
    opacity_logits.push_back(opacity_logit);
    sh.resize(sh.size() + sh_stride(), 0.0);
    set_dc_rgb(size() - 1, rgb);
    frozen.push_back(is_frozen ? 1 : 0);
    groups.push_back(group);
}

void GaussianCloud::push_row(const GaussianCloud& other, std::size_t i) {
    if (other.sh_degree != sh_degree) throw ValidationError("push_row: SH degree mismatch");
    means.push_back(other.means[i]);
    log_scales.push_back(other.log_scales[i]);
    rotations.push_back(other.rotations[i]);
    opacity_logits.push_back(other.opacity_logits[i]);
    const auto row = other.sh_of(i);
    sh.insert(sh.end(), row.begin(), row.end());
    frozen.push_back(other.frozen[i]);
    groups.push_back(other.groups[i]);
}

GaussianCloud GaussianCloud::gather(std::span<const std::size_t> indices) const {
    GaussianCloud out = make_empty_cloud(sh_degree);
    out.means.reserve(indices.size());
    out.log_scales.reserve(indices.size());
    out.rotations.reserve(indices.size());
    out.opacity_logits.reserve(indices.size());
    out.sh.reserve(indices.size() * sh_stride());
    out.frozen.reserve(indices.size());
    out.groups.reserve(indices.size());
    for (std::size_t i : indices) {
        if (i >= size()) throw ValidationError("gather index out of range");
        out.push_row(*this, i);
    }
    return out;
}

void GaussianCloud::validate() const {
    const std::size_t n = size();
    if (log_scales.size() != n || rotations.size() != n || opacity_logits.size() != n || frozen.size() != n ||
        groups.size() != n || sh.size() != n * sh_stride()) {
        throw ValidationError("GaussianCloud parameter arrays disagree on N");
    }
    if (sh_degree < 0 || sh_degree > kMaxShDegree) throw ValidationError("SH degree must be in 0..3");
    for (std::size_t i = 0; i < n; ++i) {
        if (std::abs(rotations[i].norm() - 1.0) > kUnitQuaternionTolerance) {
            throw ValidationError("rotation " + std::to_string(i) + " is not a unit quaternion");
        }
    }
}

void GaussianCloud::normalize_rotations() {
    for (auto& q : rotations) q.normalize();
}

GaussianCloud make_empty_cloud(int sh_degree) {
    if (sh_degree < 0 || sh_degree > kMaxShDegree) throw ValidationError("SH degree must be in 0..3");
    GaussianCloud cloud;
    cloud.sh_degree = sh_degree;
    return cloud;
}

Eigen::Matrix3d covariance_from(const Eigen::Vector3d& log_scales, const Eigen::Quaterniond& rotation) {
    if (std::abs(rotation.norm() - 1.0) > kUnitQuaternionTolerance) {
        throw ValidationError("covariance_from: rotation is not a unit quaternion");
    }
    const Eigen::Matrix3d r = rotation.toRotationMatrix();
    const Eigen::Vector3d s2 = (2.0 * log_scales).array().exp();
    return r * s2.asDiagonal() * r.transpose();
}

double density_at(const Eigen::Vector3d& log_scales, const Eigen::Quaterniond& rotation, const Eigen::Vector3d& offset) {
    // Sigma^-1 = R diag(exp(-2 log s)) R^T avoids forming and inverting Sigma.
    const Eigen::Vector3d inv_s2 = (-2.0 * log_scales).array().exp();
    if (!inv_s2.allFinite() || (2.0 * log_scales).array().exp().minCoeff() <= std::numeric_limits<double>::min()) {
        throw DegenerateError("density_at: covariance is singular (scale underflow)");
    }
    if (std::abs(rotation.norm() - 1.0) > kUnitQuaternionTolerance) {
        throw ValidationError("density_at: rotation is not a unit quaternion");
    }
    const Eigen::Vector3d local = rotation.conjugate() * offset;
    const double power = local.cwiseProduct(local).dot(inv_s2);
    return std::exp(-0.5 * power);
}

double density_at(const GaussianCloud& cloud, std::size_t i, const Eigen::Vector3d& offset) {
    return density_at(cloud.log_scales[i], cloud.rotations[i], offset);
}

double volume_of(const Eigen::Vector3d& log_scales) { return std::exp(log_scales.sum()); }

double volume_of(const GaussianCloud& cloud, std::size_t i) { return volume_of(cloud.log_scales[i]); }

AffinePlacement AffinePlacement::from_yaw(double scale, double yaw_radians, const Eigen::Vector3d& translation) {
    AffinePlacement p;
    p.scale = scale;
    p.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(yaw_radians, Eigen::Vector3d::UnitZ()));
    p.translation = translation;
    return p;
}

void AffinePlacement::validate() const {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ValidationError("placement scale must be positive");
    if (std::abs(rotation.norm() - 1.0) > kUnitQuaternionTolerance) {
        throw ValidationError("placement rotation is not a unit quaternion");
    }
    if (!translation.allFinite()) throw ValidationError("placement translation must be finite");
}

AffinePlacement compose(const AffinePlacement& outer, const AffinePlacement& inner) {
    AffinePlacement out;
    out.scale = outer.scale * inner.scale;
    out.rotation = (outer.rotation * inner.rotation).normalized();
    out.translation = outer.apply(inner.translation);
    return out;
}

GaussianCloud apply_placement(const GaussianCloud& cloud, const AffinePlacement& placement) {
    placement.validate();
    GaussianCloud out = cloud;
    const double log_s = std::log(placement.scale);
    const bool rotates = !(placement.rotation.w() == 1.0 && placement.rotation.vec().isZero(0.0));
    const Eigen::Matrix3d r = placement.rotation.toRotationMatrix();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.means[i] = placement.apply(cloud.means[i]);
        out.log_scales[i] = cloud.log_scales[i].array() + log_s;
        if (rotates) {
            out.rotations[i] = (placement.rotation * cloud.rotations[i]).normalized();
            if (out.sh_degree > 0) rotate_sh(out.sh_degree, r, out.sh_of(i));
        }
    }
    return out;
}

GaussianCloud promote_sh_degree(const GaussianCloud& cloud, int degree) {
    if (degree < cloud.sh_degree) throw ValidationError("promote_sh_degree cannot lower the degree");
    if (degree == cloud.sh_degree) return cloud;
    GaussianCloud out = cloud;
    out.sh_degree = degree;
    out.sh.assign(cloud.size() * out.sh_stride(), 0.0);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto src = cloud.sh_of(i);
        std::copy(src.begin(), src.end(), out.sh_of(i).begin());
    }
    return out;
}

MergedCloud merge_clouds(std::span<const GaussianCloud> clouds) {
    MergedCloud merged;
    int degree = 0;
    for (const auto& c : clouds) degree = std::max(degree, c.sh_degree);
    merged.cloud = make_empty_cloud(degree);
    for (const auto& c : clouds) {
        const GaussianCloud promoted = promote_sh_degree(c, degree);
        const std::size_t begin = merged.cloud.size();
        for (std::size_t i = 0; i < promoted.size(); ++i) merged.cloud.push_row(promoted, i);
        merged.ranges.emplace_back(begin, merged.cloud.size());
    }
    return merged;
}

std::vector<GaussianCloud> split_cloud(const GaussianCloud& cloud, std::span<const RowRange> ranges) {
    std::vector<GaussianCloud> parts;
    for (const auto& [begin, end] : ranges) {
        if (begin > end || end > cloud.size()) throw ValidationError("split_cloud: range out of bounds");
        std::vector<std::size_t> idx(end - begin);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
        parts.push_back(cloud.gather(idx));
    }
    return parts;
}

double surface_thickness(PrimitiveKind kind, const Extent& extent) {
    switch (kind) {
    case PrimitiveKind::cuboid_room: return 0.01 * std::min({extent.x, extent.y, extent.z});
    case PrimitiveKind::hemisphere_dome: return 0.01 * extent.x;
    default: return 0.0;
    }
}

namespace {

// Mean distance to the three nearest other samples. Brute force over a
// uniform grid of buckets keeps large initializations tractable.
std::vector<double> mean_knn_distance(const std::vector<Eigen::Vector3d>& points, double fallback) {
    const std::size_t n = points.size();
    std::vector<double> out(n, fallback);
    if (n < 2) return out;
    Eigen::Vector3d lo = points[0], hi = points[0];
    for (const auto& p : points) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    const Eigen::Vector3d span = (hi - lo).cwiseMax(1e-9);
    const double cell = std::max(std::cbrt(span.prod() / double(n)) * 2.0, 1e-9);
    const Eigen::Vector3i dims = ((span / cell).array().floor().cast<int>() + 1).matrix();
    auto cell_of = [&](const Eigen::Vector3d& p) {
        Eigen::Vector3i c = ((p - lo) / cell).array().floor().cast<int>();
        return c.cwiseMax(Eigen::Vector3i::Zero()).cwiseMin(dims - Eigen::Vector3i::Ones()).eval();
    };
    auto flat = [&](const Eigen::Vector3i& c) { return (std::size_t(c.z()) * dims.y() + c.y()) * dims.x() + c.x(); };
    std::vector<std::vector<std::size_t>> buckets(std::size_t(dims.x()) * dims.y() * dims.z());
    for (std::size_t i = 0; i < n; ++i) buckets[flat(cell_of(points[i]))].push_back(i);

    const int k = int(std::min<std::size_t>(3, n - 1));
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::Vector3i c = cell_of(points[i]);
        double best[3] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                          std::numeric_limits<double>::infinity()};
        for (int ring = 0;; ++ring) {
            for (int dz = -ring; dz <= ring; ++dz)
                for (int dy = -ring; dy <= ring; ++dy)
                    for (int dx = -ring; dx <= ring; ++dx) {
                        if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
                        const Eigen::Vector3i q = c + Eigen::Vector3i(dx, dy, dz);
                        if ((q.array() < 0).any() || (q.array() >= dims.array()).any()) continue;
                        for (std::size_t j : buckets[flat(q)]) {
                            if (j == i) continue;
                            const double d = (points[i] - points[j]).norm();
                            if (d < best[2]) {
                                best[2] = d;
                                if (best[2] < best[1]) std::swap(best[1], best[2]);
                                if (best[1] < best[0]) std::swap(best[0], best[1]);
                            }
                        }
                    }
            // Any point outside the searched cube is at least ring * cell away.
            const bool covered = (ring >= dims.maxCoeff());
            if (covered || best[k - 1] <= ring * cell) break;
        }
        double sum = 0.0;
        for (int m = 0; m < k; ++m) sum += best[m];
        out[i] = std::max(sum / k, 1e-7);
    }
    return out;
}

Eigen::Vector3d random_unit(std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (;;) {
        Eigen::Vector3d v(normal(rng), normal(rng), normal(rng));
        const double len = v.norm();
        if (len > 1e-12) return v / len;
    }
}

} // namespace

GaussianCloud init_primitive(PrimitiveKind kind, std::size_t count, const Extent& extent, std::uint64_t seed,
                             const PrimitiveOptions& options) {
    if (count == 0) throw ValidationError("init_primitive: count must be positive");
    const bool radial = (kind == PrimitiveKind::sphere || kind == PrimitiveKind::hemisphere_dome);
    if (!(extent.x > 0.0) || (!radial && (!(extent.y > 0.0) || !(extent.z > 0.0)))) {
        throw ValidationError("init_primitive: extents must be positive");
    }
    if (!(options.opacity > 0.0 && options.opacity < 1.0)) throw ValidationError("init opacity must be in (0,1)");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<Eigen::Vector3d> points;
    std::vector<GaussianGroup> groups;
    points.reserve(count);
    groups.reserve(count);
    const double eps = surface_thickness(kind, extent);

    switch (kind) {
    case PrimitiveKind::sphere: {
        if (count == 1) {
            points.emplace_back(Eigen::Vector3d::Zero());
            groups.push_back(GaussianGroup::none);
            break;
        }
        for (std::size_t i = 0; i < count; ++i) {
            const double r = extent.x * std::cbrt(unit(rng));
            points.push_back(r * random_unit(rng));
            groups.push_back(GaussianGroup::none);
        }
        break;
    }
    case PrimitiveKind::box: {
        for (std::size_t i = 0; i < count; ++i) {
            points.emplace_back((unit(rng) - 0.5) * extent.x, (unit(rng) - 0.5) * extent.y, (unit(rng) - 0.5) * extent.z);
            groups.push_back(GaussianGroup::none);
        }
        break;
    }
    case PrimitiveKind::cuboid_room: {
        const double w = extent.x, d = extent.y, h = extent.z;
        // floor, ceiling, -x wall, +x wall, -y wall, +y wall
        const double areas[6] = {w * d, w * d, d * h, d * h, w * h, w * h};
        double total = 0.0;
        for (double a : areas) total += a;
        for (std::size_t i = 0; i < count; ++i) {
            double pick = unit(rng) * total;
            int face = 0;
            while (face < 5 && pick >= areas[face]) pick -= areas[face++];
            const double a = unit(rng), b = unit(rng), inset = unit(rng) * eps;
            Eigen::Vector3d p;
            switch (face) {
            case 0: p = {(a - 0.5) * w, (b - 0.5) * d, inset}; break;
            case 1: p = {(a - 0.5) * w, (b - 0.5) * d, h - inset}; break;
            case 2: p = {-0.5 * w + inset, (a - 0.5) * d, b * h}; break;
            case 3: p = {0.5 * w - inset, (a - 0.5) * d, b * h}; break;
            case 4: p = {(a - 0.5) * w, -0.5 * d + inset, b * h}; break;
            default: p = {(a - 0.5) * w, 0.5 * d - inset, b * h}; break;
            }
            points.push_back(p);
            groups.push_back(face == 0 ? GaussianGroup::ground : GaussianGroup::surroundings);
        }
        break;
    }
    case PrimitiveKind::hemisphere_dome: {
        const double r = extent.x;
        // Ground disk area pi r^2, dome area 2 pi r^2.
        for (std::size_t i = 0; i < count; ++i) {
            if (unit(rng) < 1.0 / 3.0) {
                const double rho = r * std::sqrt(unit(rng));
                const double phi = 2.0 * std::numbers::pi * unit(rng);
                points.emplace_back(rho * std::cos(phi), rho * std::sin(phi), unit(rng) * eps);
                groups.push_back(GaussianGroup::ground);
            } else {
                Eigen::Vector3d dir = random_unit(rng);
                dir.z() = std::abs(dir.z());
                const double rho = r - unit(rng) * eps;
                points.push_back(rho * dir);
                groups.push_back(GaussianGroup::surroundings);
            }
        }
        break;
    }
    }

    const double fallback = 0.1 * (radial ? extent.x : std::min({extent.x, extent.y, extent.z}));
    const std::vector<double> spacing = mean_knn_distance(points, fallback);
    GaussianCloud cloud = make_empty_cloud(0);
    const double opacity_logit = logit(options.opacity);
    for (std::size_t i = 0; i < points.size(); ++i) {
        cloud.push_back(points[i], Eigen::Vector3d::Constant(std::log(spacing[i])), Eigen::Quaterniond::Identity(),
                        opacity_logit, options.rgb, groups[i]);
    }
    return cloud;
}

DensifyResult densify_clone_split(const GaussianCloud& cloud, std::span<const double> positional_grad_norms,
                                  double grad_threshold, double scale_percentile, const DensifyOptions& options) {
    if (positional_grad_norms.size() != cloud.size()) {
        throw ValidationError("densify_clone_split: gradient norms not aligned with cloud");
    }
    if (!(options.split_divisor > 1.0)) throw ValidationError("split divisor must exceed 1");
    DensifyResult result;
    result.cloud = cloud;
    result.source.resize(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) result.source[i] = i;
    if (cloud.empty()) return result;

    std::vector<double> max_scales(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) max_scales[i] = cloud.log_scales[i].maxCoeff();
    std::vector<double> sorted = max_scales;
    std::sort(sorted.begin(), sorted.end());
    const double rank = std::ceil(std::clamp(scale_percentile, 0.0, 100.0) / 100.0 * double(sorted.size()));
    const std::size_t idx = std::size_t(std::clamp(rank - 1.0, 0.0, double(sorted.size() - 1)));
    const double boundary = sorted[idx];

    // Offset puts each child's density at the parent center at exactly 1/2.
    const double log_div = std::log(options.split_divisor);
    const double offset_factor = std::sqrt(2.0 * std::numbers::ln2) / options.split_divisor;

    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (cloud.frozen[i] || !(positional_grad_norms[i] > grad_threshold)) continue;
        if (options.max_count != 0 && result.cloud.size() >= options.max_count) break;
        if (max_scales[i] <= boundary) {
            result.cloud.push_row(cloud, i);
            result.source.push_back(i);
            ++result.cloned;
        } else {
            int axis = 0;
            cloud.log_scales[i].maxCoeff(&axis);
            const Eigen::Vector3d major = cloud.rotations[i].toRotationMatrix().col(axis);
            const Eigen::Vector3d offset = offset_factor * std::exp(max_scales[i]) * major;
            result.cloud.means[i] = cloud.means[i] + offset;
            result.cloud.log_scales[i] = cloud.log_scales[i].array() - log_div;
            const std::size_t row[1] = {i};
            const GaussianCloud child = result.cloud.gather(row);
            result.cloud.push_row(child, 0);
            result.cloud.means.back() = cloud.means[i] - offset;
            result.source.push_back(i);
            ++result.split;
        }
    }
    return result;
}

} // namespace dreamscene
