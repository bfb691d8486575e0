#pragma once

#include <Eigen/Core>

namespace dreamscene {

/// Pinhole camera. `yaw` is the azimuth of the viewing direction about world
/// +z. `pitch` is the polar angle, from world +z, of the camera's backward
/// axis (orbit convention): 90 degrees looks horizontally, smaller values
/// look down toward the ground, larger values look up.
///
/// Camera frame: x right, y down, z forward. Pixel (i, j) has its center at
/// (i + 0.5, j + 0.5); the principal point is the image center.
struct Camera {
    Eigen::Vector3d position = Eigen::Vector3d::Zero();
    double yaw = 0.0;
    double pitch = 1.5707963267948966;
    double vertical_fov = 0.8726646259971648; // 50 degrees
    int width = 64;
    int height = 64;
    double near = 0.01;
    double far = 100.0;

    void validate() const;

    Eigen::Vector3d forward() const;
    /// Rows are the camera right, down and forward axes in world coordinates.
    Eigen::Matrix3d world_to_camera() const;
    Eigen::Vector3d to_camera(const Eigen::Vector3d& world) const;
    double focal() const;
    double cx() const { return 0.5 * width; }
    double cy() const { return 0.5 * height; }

    /// Camera at `position` aimed at `target`; throws if the direction is vertical.
    static Camera look_at(const Eigen::Vector3d& position, const Eigen::Vector3d& target, double vertical_fov,
                          int width, int height, double near = 0.01, double far = 100.0);
};

double degrees(double radians);
double radians(double degrees);

} // namespace dreamscene
