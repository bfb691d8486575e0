#include "dreamscene/camera.hpp"

#include "dreamscene/error.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dreamscene {

double degrees(double r) { return r * 180.0 / std::numbers::pi; }
double radians(double d) { return d * std::numbers::pi / 180.0; }

void Camera::validate() const {
    if (!(near > 0.0) || !(far > near)) throw ValidationError("camera requires 0 < near < far");
    if (!(pitch > 0.0 && pitch < std::numbers::pi)) throw ValidationError("camera pitch must lie in (0, 180) degrees");
    if (width < 1 || height < 1) throw ValidationError("camera resolution must be at least 1x1");
    if (!(vertical_fov > 0.0 && vertical_fov < std::numbers::pi)) throw ValidationError("vertical fov out of range");
    if (!position.allFinite() || !std::isfinite(yaw)) throw ValidationError("camera pose must be finite");
}

Eigen::Vector3d Camera::forward() const {
    const double sp = std::sin(pitch);
    return {sp * std::cos(yaw), sp * std::sin(yaw), -std::cos(pitch)};
}

Eigen::Matrix3d Camera::world_to_camera() const {
    const Eigen::Vector3d f = forward();
    const Eigen::Vector3d right(std::sin(yaw), -std::cos(yaw), 0.0);
    const Eigen::Vector3d down = f.cross(right);
    Eigen::Matrix3d r;
    r.row(0) = right.transpose();
    r.row(1) = down.transpose();
    r.row(2) = f.transpose();
    return r;
}

Eigen::Vector3d Camera::to_camera(const Eigen::Vector3d& world) const { return world_to_camera() * (world - position); }

double Camera::focal() const { return 0.5 * height / std::tan(0.5 * vertical_fov); }

Camera Camera::look_at(const Eigen::Vector3d& position, const Eigen::Vector3d& target, double vertical_fov, int width,
                       int height, double near, double far) {
    const Eigen::Vector3d dir = target - position;
    const double len = dir.norm();
    if (!(len > 0.0)) throw ValidationError("look_at: target coincides with camera position");
    const Eigen::Vector3d f = dir / len;
    if (std::hypot(f.x(), f.y()) < 1e-9) throw ValidationError("look_at: vertical view direction has no yaw");
    Camera cam;
    cam.position = position;
    cam.yaw = std::atan2(f.y(), f.x());
    cam.pitch = std::acos(std::clamp(-f.z(), -1.0, 1.0));
    cam.vertical_fov = vertical_fov;
    cam.width = width;
    cam.height = height;
    cam.near = near;
    cam.far = far;
    cam.validate();
    return cam;
}

} // namespace dreamscene
