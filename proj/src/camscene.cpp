#include "dreamscene/camscene.hpp"

#include "dreamscene/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <set>

namespace dreamscene {

namespace {

constexpr double kPi = std::numbers::pi;

double number(const nlohmann::json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) throw ParseError(where + ": missing '" + key + "'");
    if (!j[key].is_number()) throw ParseError(where + ": '" + key + "' must be a number");
    return j[key].get<double>();
}

std::string text(const nlohmann::json& j, const char* key, const std::string& where, const std::string& fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_string()) throw ParseError(where + ": '" + key + "' must be a string");
    return j[key].get<std::string>();
}

Eigen::Vector3d vec3(const nlohmann::json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 3) throw ParseError(where + " must be an array of 3 numbers");
    Eigen::Vector3d v;
    for (int k = 0; k < 3; ++k) {
        if (!j[k].is_number()) throw ParseError(where + " must be an array of 3 numbers");
        v[k] = j[k].get<double>();
    }
    return v;
}

} // namespace

std::string to_string(EnvironmentKind kind) { return kind == EnvironmentKind::indoor ? "indoor" : "outdoor"; }

AffinePlacement ObjectSpec::placement() const { return AffinePlacement::from_yaw(scale, radians(yaw_deg), translation); }

void SceneLayout::validate() const {
    if (kind == EnvironmentKind::indoor) {
        if (!(room.x > 0 && room.y > 0 && room.z > 0)) throw ValidationError("room extents must be positive");
    } else if (!(radius > 0.0)) {
        throw ValidationError("outdoor radius must be positive");
    }
    std::set<std::string> ids;
    const double tol = 1e-9;
    for (const auto& o : objects) {
        if (o.id.empty()) throw ValidationError("object id must be non-empty");
        if (!ids.insert(o.id).second) throw ValidationError("duplicate object id '" + o.id + "'");
        if (!(o.bounding_radius > 0.0)) throw ValidationError("object '" + o.id + "' needs a positive bounding radius");
        o.placement().validate();
        const Eigen::Vector3d& t = o.translation;
        const double r = o.bounding_radius;
        bool inside;
        if (kind == EnvironmentKind::indoor) {
            inside = std::abs(t.x()) + r <= room.x / 2 + tol && std::abs(t.y()) + r <= room.y / 2 + tol &&
                     t.z() - r >= -tol && t.z() + r <= room.z + tol;
        } else {
            inside = t.norm() + r <= radius + tol && t.z() - r >= -tol;
        }
        if (!inside) throw ValidationError("object '" + o.id + "' does not fit inside the environment");
    }
}

const ObjectSpec& SceneLayout::object(const std::string& id) const {
    for (const auto& o : objects)
        if (o.id == id) return o;
    throw NotFoundError("no object with id '" + id + "'");
}

SceneLayout layout_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ParseError("layout must be a JSON object");
    if (!j.contains("environment") || !j["environment"].is_object()) throw ParseError("layout: missing 'environment'");
    const auto& env = j["environment"];
    SceneLayout layout;
    const std::string kind = text(env, "kind", "environment", "");
    if (kind == "indoor") {
        layout.kind = EnvironmentKind::indoor;
        const Eigen::Vector3d dims = vec3(env.contains("dims") ? env["dims"] : nlohmann::json(), "environment.dims");
        layout.room = {dims.x(), dims.y(), dims.z()};
    } else if (kind == "outdoor") {
        layout.kind = EnvironmentKind::outdoor;
        layout.radius = number(env, "radius", "environment");
    } else {
        throw ParseError("environment.kind must be 'indoor' or 'outdoor'");
    }
    layout.condition = text(env, "condition", "environment", layout.condition);
    layout.ground_condition = text(env, "ground_condition", "environment", layout.ground_condition);
    if (j.contains("objects")) {
        if (!j["objects"].is_array()) throw ParseError("layout: 'objects' must be an array");
        for (std::size_t k = 0; k < j["objects"].size(); ++k) {
            const auto& o = j["objects"][k];
            const std::string where = "objects[" + std::to_string(k) + "]";
            if (!o.is_object()) throw ParseError(where + " must be an object");
            ObjectSpec spec;
            spec.id = text(o, "id", where, "");
            spec.condition = text(o, "condition", where, spec.id);
            spec.bounding_radius = number(o, "bounding_radius", where);
            if (o.contains("placement")) {
                const auto& p = o["placement"];
                if (!p.is_object()) throw ParseError(where + ".placement must be an object");
                if (p.contains("s")) spec.scale = number(p, "s", where + ".placement");
                if (p.contains("yaw_deg")) spec.yaw_deg = number(p, "yaw_deg", where + ".placement");
                if (p.contains("t")) spec.translation = vec3(p["t"], where + ".placement.t");
            }
            layout.objects.push_back(spec);
        }
    }
    layout.validate();
    return layout;
}

nlohmann::json layout_to_json(const SceneLayout& layout) {
    nlohmann::json env{{"kind", to_string(layout.kind)},
                       {"condition", layout.condition},
                       {"ground_condition", layout.ground_condition}};
    if (layout.kind == EnvironmentKind::indoor) {
        env["dims"] = {layout.room.x, layout.room.y, layout.room.z};
    } else {
        env["radius"] = layout.radius;
    }
    nlohmann::json objects = nlohmann::json::array();
    for (const auto& o : layout.objects) {
        objects.push_back({{"id", o.id},
                           {"condition", o.condition},
                           {"bounding_radius", o.bounding_radius},
                           {"placement",
                            {{"s", o.scale},
                             {"yaw_deg", o.yaw_deg},
                             {"t", {o.translation.x(), o.translation.y(), o.translation.z()}}}}});
    }
    return {{"environment", env}, {"objects", objects}};
}

SceneLayout load_layout(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open layout " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what(), e.byte);
    }
    return layout_from_json(j);
}

std::vector<Region> partition_regions(const SceneLayout& layout, const PartitionOptions& options) {
    std::vector<Region> regions;
    if (layout.kind == EnvironmentKind::outdoor) {
        if (options.rings < 1) throw ValidationError("partition needs at least one ring");
        const double R = layout.radius;
        for (int k = 1; k <= options.rings; ++k) {
            Region r;
            r.kind = Region::Kind::ring;
            r.inner_radius = R * (k - 1) / options.rings;
            r.outer_radius = R * k / options.rings;
            r.area = kPi * (r.outer_radius * r.outer_radius - r.inner_radius * r.inner_radius);
            const double lo = r.inner_radius, hi = r.outer_radius;
            r.contains = [lo, hi, first = k == 1](const Eigen::Vector2d& p) {
                const double d = p.norm();
                return (first ? d >= lo : d > lo) && d <= hi;
            };
            regions.push_back(std::move(r));
        }
        return regions;
    }

    const double hw = layout.room.x / 2, hd = layout.room.y / 2;
    std::vector<Eigen::Vector2d> centers;
    std::vector<double> radii;
    for (const auto& o : layout.objects) {
        centers.push_back(o.translation.head<2>());
        radii.push_back(options.focal_radius_factor * o.bounding_radius);
    }
    auto owner = [centers, radii](const Eigen::Vector2d& p) -> int {
        int best = -1;
        double best_d = 0.0;
        for (std::size_t k = 0; k < centers.size(); ++k) {
            const double d = (p - centers[k]).norm();
            if (d > radii[k]) continue;
            // Voronoi clipping: the nearest center wins, lower index on ties.
            double nearest = d;
            for (std::size_t j = 0; j < centers.size(); ++j) nearest = std::min(nearest, (p - centers[j]).norm());
            if (d == nearest && (best < 0 || d < best_d)) {
                best = int(k);
                best_d = d;
            }
        }
        return best;
    };
    auto in_room = [hw, hd](const Eigen::Vector2d& p) { return std::abs(p.x()) <= hw && std::abs(p.y()) <= hd; };

    // Midpoint quadrature for areas and centroids.
    auto integrate = [](Region& r, double x0, double x1, double y0, double y1) {
        const int n = 64;
        const double dx = (x1 - x0) / n, dy = (y1 - y0) / n;
        double area = 0.0;
        Eigen::Vector2d moment = Eigen::Vector2d::Zero();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const Eigen::Vector2d p(x0 + (i + 0.5) * dx, y0 + (j + 0.5) * dy);
                if (!r.contains(p)) continue;
                area += dx * dy;
                moment += dx * dy * p;
            }
        r.area = area;
        r.centroid = area > 0 ? Eigen::Vector2d(moment / area) : Eigen::Vector2d(0.5 * (x0 + x1), 0.5 * (y0 + y1));
    };

    for (std::size_t k = 0; k < layout.objects.size(); ++k) {
        Region r;
        r.kind = Region::Kind::focal;
        r.object_id = layout.objects[k].id;
        r.contains = [owner, in_room, k](const Eigen::Vector2d& p) { return in_room(p) && owner(p) == int(k); };
        integrate(r, std::max(-hw, centers[k].x() - radii[k]), std::min(hw, centers[k].x() + radii[k]),
                  std::max(-hd, centers[k].y() - radii[k]), std::min(hd, centers[k].y() + radii[k]));
        regions.push_back(std::move(r));
    }
    const int nx = std::max(1, int(std::lround(layout.room.x / options.cell_size)));
    const int ny = std::max(1, int(std::lround(layout.room.y / options.cell_size)));
    for (int i = 0; i < nx; ++i) {
        for (int j = 0; j < ny; ++j) {
            const double x0 = -hw + layout.room.x * i / nx, x1 = -hw + layout.room.x * (i + 1) / nx;
            const double y0 = -hd + layout.room.y * j / ny, y1 = -hd + layout.room.y * (j + 1) / ny;
            Region r;
            r.kind = Region::Kind::residual;
            const bool last_x = i == nx - 1, last_y = j == ny - 1;
            r.contains = [=](const Eigen::Vector2d& p) {
                const bool in_x = p.x() >= x0 && (last_x ? p.x() <= x1 : p.x() < x1);
                const bool in_y = p.y() >= y0 && (last_y ? p.y() <= y1 : p.y() < y1);
                return in_x && in_y && owner(p) < 0;
            };
            integrate(r, x0, x1, y0, y1);
            if (r.area > 0.0) regions.push_back(std::move(r));
        }
    }
    return regions;
}

void SamplingConfig::validate() const {
    if (stage != 1 && stage != 2) throw ValidationError("sample_cameras handles stages 1 and 2 only");
    if (!(pitch_min_deg > 0.0 && pitch_max_deg < 180.0 && pitch_min_deg <= pitch_max_deg)) {
        throw ValidationError("pitch range must lie within (0, 180) degrees");
    }
    if (!(late_phase_fraction > 0.0 && late_phase_fraction < 1.0)) {
        throw ValidationError("late_phase_fraction must be in (0, 1)");
    }
    if (group_size < 1) throw ValidationError("group_size must be >= 1");
    if (max_retries < 1) throw ValidationError("max_retries must be >= 1");
    if (radius_fractions.empty()) throw ValidationError("radius_fractions must be non-empty");
}

SamplingConfig default_sampling(EnvironmentKind kind, int stage) {
    SamplingConfig c;
    c.stage = stage;
    if (kind == EnvironmentKind::outdoor) {
        c.pitch_min_deg = stage == 1 ? 80.0 : 85.0;
        c.pitch_max_deg = stage == 1 ? 110.0 : 95.0;
    } else {
        c.pitch_min_deg = stage == 1 ? 75.0 : 45.0;
        c.pitch_max_deg = stage == 1 ? 115.0 : 90.0;
    }
    return c;
}

bool collision_check(const Camera& camera, const SceneLayout& layout, double margin, double wall_margin) {
    const Eigen::Vector3d& p = camera.position;
    for (const auto& o : layout.objects) {
        if ((p - o.translation).norm() <= o.bounding_radius + margin) return true;
    }
    if (layout.kind == EnvironmentKind::indoor) {
        return !(std::abs(p.x()) < layout.room.x / 2 - wall_margin && std::abs(p.y()) < layout.room.y / 2 - wall_margin &&
                 p.z() > wall_margin && p.z() < layout.room.z - wall_margin);
    }
    return !(p.norm() < layout.radius - wall_margin && p.z() > 0.0);
}

Camera make_camera(const Eigen::Vector3d& position, double yaw, double pitch, const CameraTemplate& tmpl) {
    Camera c;
    c.position = position;
    c.yaw = yaw;
    c.pitch = pitch;
    c.vertical_fov = radians(tmpl.vertical_fov_deg);
    c.width = tmpl.width;
    c.height = tmpl.height;
    c.near = tmpl.near;
    c.far = tmpl.far;
    return c;
}

Camera orbit_camera(const Eigen::Vector3d& center, double radius, double azimuth, double elevation,
                    const CameraTemplate& tmpl) {
    const Eigen::Vector3d offset(std::cos(elevation) * std::cos(azimuth), std::cos(elevation) * std::sin(azimuth),
                                 std::sin(elevation));
    // Looking back at the center: yaw opposite the offset, pitch tilted by the elevation.
    return make_camera(center + radius * offset, azimuth + kPi, kPi / 2 - elevation, tmpl);
}

namespace {

class PoseSampler {
public:
    PoseSampler(const SceneLayout& layout, const SamplingConfig& config, std::mt19937_64& rng)
        : layout_(layout), config_(config), rng_(rng) {}

    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
    double pitch() { return radians(uniform(config_.pitch_min_deg, config_.pitch_max_deg)); }
    double yaw() { return uniform(0.0, 2.0 * kPi); }

    Eigen::Vector2d in_disk(double radius) {
        const double r = radius * std::sqrt(uniform(0.0, 1.0));
        const double a = uniform(0.0, 2.0 * kPi);
        return {r * std::cos(a), r * std::sin(a)};
    }

    bool clear(const std::vector<Camera>& poses) const {
        for (const auto& c : poses)
            if (collision_check(c, layout_, config_.collision_margin, config_.wall_margin)) return false;
        return true;
    }

    /// Retries `make` until every pose it returns is collision free.
    template <typename Make>
    std::vector<Camera> with_retries(const std::string& slot, Make&& make) {
        for (int attempt = 0; attempt < config_.max_retries; ++attempt) {
            std::vector<Camera> poses = make();
            if (clear(poses)) return poses;
        }
        throw StarvationError("no collision-free pose for " + slot + " after " + std::to_string(config_.max_retries) +
                              " attempts");
    }

    Camera at(const Eigen::Vector2d& xy, double z, double yaw, double pitch) const {
        return make_camera(Eigen::Vector3d(xy.x(), xy.y(), z), yaw, pitch, config_.camera);
    }

private:
    const SceneLayout& layout_;
    const SamplingConfig& config_;
    std::mt19937_64& rng_;
};

double outdoor_max_ring(const SceneLayout& layout, const SamplingConfig& config) {
    const double reach = layout.radius - config.wall_margin;
    const double h = config.outdoor_height;
    return 0.9 * std::sqrt(std::max(0.0, reach * reach - h * h));
}

} // namespace

std::vector<Camera> sample_cameras(const SceneLayout& layout, const SamplingConfig& config, double progress,
                                   std::mt19937_64& rng) {
    config.validate();
    layout.validate();
    if (!(progress >= 0.0 && progress <= 1.0)) throw ValidationError("progress must be in [0, 1]");
    PoseSampler s(layout, config, rng);
    const bool late = progress >= config.late_phase_fraction;
    const std::string where = to_string(layout.kind) + " stage " + std::to_string(config.stage);

    if (layout.kind == EnvironmentKind::outdoor) {
        const double R = layout.radius, h = config.outdoor_height;
        if (config.stage == 1 && !late) {
            return s.with_retries(where + " pose slot 0",
                                  [&] { return std::vector<Camera>{s.at(s.in_disk(0.1 * R), h, s.yaw(), s.pitch())}; });
        }
        if (config.stage == 1) {
            // Side-by-side group looking the same way, offsets across the view direction.
            return s.with_retries(where + " group slot", [&] {
                const double yaw = s.yaw(), pitch = s.pitch();
                const Eigen::Vector2d side(-std::sin(yaw), std::cos(yaw));
                std::vector<Camera> group;
                for (int g = 0; g < config.group_size; ++g) {
                    const double frac = config.radius_fractions[std::size_t(g / 2) % config.radius_fractions.size()];
                    const double sign = g % 2 == 0 ? 1.0 : -1.0;
                    group.push_back(s.at(sign * frac * R * side, h, yaw, pitch));
                }
                return group;
            });
        }
        // Stage 2: one pose per ring radius k R / C (k = 0..C), all along one direction.
        const int C = config.partition.rings;
        const double rho_max = outdoor_max_ring(layout, config);
        return s.with_retries(where + " ring group slot", [&] {
            const double phi = s.yaw();
            const Eigen::Vector2d dir(std::cos(phi), std::sin(phi));
            std::vector<Camera> group;
            for (int k = 0; k < config.group_size; ++k) {
                const double rho = std::min(R * double(std::min(k, C)) / C, rho_max);
                group.push_back(s.at(rho * dir, h, phi, s.pitch()));
            }
            return group;
        });
    }

    const double w = layout.room.x, d = layout.room.y, H = layout.room.z;
    const double height = 0.5 * H;
    if (config.stage == 1 && (!late || layout.objects.empty())) {
        return s.with_retries(where + " pose slot 0", [&] {
            return std::vector<Camera>{s.at(s.in_disk(0.15 * std::min(w, d)), height, s.yaw(), s.pitch())};
        });
    }
    if (config.stage == 1) {
        // Ring around one object, looking away from it toward the surroundings.
        std::vector<Camera> poses;
        std::uniform_int_distribution<std::size_t> pick(0, layout.objects.size() - 1);
        for (int g = 0; g < config.group_size; ++g) {
            auto group = s.with_retries(where + " object-ring slot " + std::to_string(g), [&] {
                const ObjectSpec& o = layout.objects[pick(rng)];
                const double a = s.yaw();
                const Eigen::Vector2d xy = o.translation.head<2>() +
                                           2.0 * o.bounding_radius * Eigen::Vector2d(std::cos(a), std::sin(a));
                return std::vector<Camera>{s.at(xy, height, a, s.pitch())};
            });
            poses.push_back(group.front());
        }
        return poses;
    }
    // Stage 2: positions anywhere in the room, aimed at a chosen region.
    const std::vector<Region> regions = partition_regions(layout, config.partition);
    std::vector<const Region*> focal, residual;
    for (const auto& r : regions) (r.kind == Region::Kind::focal ? focal : residual).push_back(&r);
    std::vector<Camera> poses;
    for (int g = 0; g < config.group_size; ++g) {
        auto group = s.with_retries(where + " region slot " + std::to_string(g), [&] {
            const bool use_focal = !focal.empty() && (residual.empty() || s.uniform(0.0, 1.0) < config.focal_probability);
            const auto& pool = use_focal ? focal : residual;
            const Region& target = *pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
            const Eigen::Vector2d xy(s.uniform(-w / 2, w / 2), s.uniform(-d / 2, d / 2));
            const Eigen::Vector2d to = target.centroid - xy;
            const double yaw = to.norm() > 1e-6 ? std::atan2(to.y(), to.x()) : s.yaw();
            return std::vector<Camera>{s.at(xy, height, yaw, s.pitch())};
        });
        poses.push_back(group.front());
    }
    return poses;
}

bool same_pose(const Camera& a, const Camera& b) {
    const double tol = radians(0.01);
    const double dyaw = std::remainder(a.yaw - b.yaw, 2.0 * kPi);
    return (a.position - b.position).norm() <= 1e-6 && std::abs(dyaw) <= tol && std::abs(a.pitch - b.pitch) <= tol;
}

std::vector<Camera> stage3_union(std::span<const Camera> first, std::span<const Camera> second) {
    std::vector<Camera> out;
    auto add = [&](const Camera& c) {
        for (const auto& existing : out)
            if (same_pose(existing, c)) return;
        out.push_back(c);
    };
    for (const auto& c : first) add(c);
    for (const auto& c : second) add(c);
    return out;
}

void write_pose_csv(std::span<const Camera> cameras, std::span<const int> stages, std::ostream& out) {
    if (stages.size() != cameras.size()) throw ValidationError("pose csv: one stage label per camera needed");
    out << "stage,x,y,z,yaw_deg,pitch_deg\n" << std::setprecision(17);
    for (std::size_t k = 0; k < cameras.size(); ++k) {
        const Camera& c = cameras[k];
        out << stages[k] << ',' << c.position.x() << ',' << c.position.y() << ',' << c.position.z() << ','
            << degrees(c.yaw) << ',' << degrees(c.pitch) << '\n';
    }
}

} // namespace dreamscene
