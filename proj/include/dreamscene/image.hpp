#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace dreamscene {

/// Row-major RGB image with double channels. Pixel (x, y) occupies
/// data[3 * (y * width + x) + c].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, double fill = 0.0) : width(w), height(h), data(std::size_t(3) * w * h, fill) {}
    Image(int w, int h, const Eigen::Vector3d& rgb);

    std::size_t pixel_count() const { return std::size_t(width) * height; }
    bool same_shape(const Image& other) const { return width == other.width && height == other.height; }

    double& at(int x, int y, int c) { return data[3 * (std::size_t(y) * width + x) + c]; }
    double at(int x, int y, int c) const { return data[3 * (std::size_t(y) * width + x) + c]; }

    Eigen::Vector3d rgb(int x, int y) const;
    void set_rgb(int x, int y, const Eigen::Vector3d& value);

    Image& operator+=(const Image& other);
    Image& operator-=(const Image& other);
    Image& operator*=(double s);
};

Image operator+(Image a, const Image& b);
Image operator-(Image a, const Image& b);
Image operator*(double s, Image a);

/// Single-channel float map (alpha, depth).
struct Plane {
    int width = 0;
    int height = 0;
    std::vector<double> data;

    Plane() = default;
    Plane(int w, int h, double fill = 0.0) : width(w), height(h), data(std::size_t(w) * h, fill) {}

    double& at(int x, int y) { return data[std::size_t(y) * width + x]; }
    double at(int x, int y) const { return data[std::size_t(y) * width + x]; }
};

double squared_norm(const Image& img);
double mean_squared_error(const Image& a, const Image& b);
double max_abs_difference(const Image& a, const Image& b);
double psnr(const Image& reference, const Image& test, double peak = 1.0);

/// Binary P6 PPM, 8-bit, values clamped to [0,1] and rounded.
void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

/// Raw float32 depth with a 16-byte header: 8-byte magic "DSDEPTH1",
/// uint32 width, uint32 height (little-endian), then row-major floats.
void write_depth(const Plane& depth, const std::filesystem::path& path);
Plane read_depth(const std::filesystem::path& path);

} // namespace dreamscene
