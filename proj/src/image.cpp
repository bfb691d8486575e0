#include "dreamscene/image.hpp"

#include "dreamscene/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

namespace dreamscene {

const char* to_string(ErrorCategory category) {
    switch (category) {
    case ErrorCategory::validation: return "validation";
    case ErrorCategory::degenerate: return "degenerate";
    case ErrorCategory::parse: return "parse";
    case ErrorCategory::io: return "io";
    case ErrorCategory::starvation: return "starvation";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::not_found: return "not_found";
    }
    return "unknown";
}

Image::Image(int w, int h, const Eigen::Vector3d& rgb) : Image(w, h) {
    for (std::size_t p = 0; p < pixel_count(); ++p) {
        data[3 * p + 0] = rgb.x();
        data[3 * p + 1] = rgb.y();
        data[3 * p + 2] = rgb.z();
    }
}

Eigen::Vector3d Image::rgb(int x, int y) const {
    const std::size_t base = 3 * (std::size_t(y) * width + x);
    return {data[base], data[base + 1], data[base + 2]};
}

void Image::set_rgb(int x, int y, const Eigen::Vector3d& value) {
    const std::size_t base = 3 * (std::size_t(y) * width + x);
    data[base] = value.x();
    data[base + 1] = value.y();
    data[base + 2] = value.z();
}

Image& Image::operator+=(const Image& other) {
    if (!same_shape(other)) throw ValidationError("image shape mismatch in +=");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += other.data[i];
    return *this;
}

Image& Image::operator-=(const Image& other) {
    if (!same_shape(other)) throw ValidationError("image shape mismatch in -=");
    for (std::size_t i = 0; i < data.size(); ++i) data[i] -= other.data[i];
    return *this;
}

Image& Image::operator*=(double s) {
    for (double& v : data) v *= s;
    return *this;
}

Image operator+(Image a, const Image& b) { return a += b; }
Image operator-(Image a, const Image& b) { return a -= b; }
Image operator*(double s, Image a) { return a *= s; }

double squared_norm(const Image& img) {
    double acc = 0.0;
    for (double v : img.data) acc += v * v;
    return acc;
}

double mean_squared_error(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw ValidationError("image shape mismatch in mean_squared_error");
    if (a.data.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc / double(a.data.size());
}

double max_abs_difference(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw ValidationError("image shape mismatch in max_abs_difference");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

double psnr(const Image& reference, const Image& test, double peak) {
    const double mse = mean_squared_error(reference, test);
    if (mse <= 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

void write_ppm(const Image& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> bytes(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const double v = std::clamp(img.data[i], 0.0, 1.0);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in) {
    std::string token;
    char ch = 0;
    while (in.get(ch)) {
        if (ch == '#') {
            std::string discard;
            std::getline(in, discard);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!token.empty()) break;
            continue;
        }
        token.push_back(ch);
    }
    return token;
}

} // namespace

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const std::string magic = next_token(in);
    if (magic != "P6") throw ParseError("not a binary PPM (P6): " + path.string(), 0);
    int width = 0, height = 0, maxval = 0;
    try {
        width = std::stoi(next_token(in));
        height = std::stoi(next_token(in));
        maxval = std::stoi(next_token(in));
    } catch (const std::exception&) {
        throw ParseError("malformed PPM header in " + path.string(), std::uint64_t(in.tellg()));
    }
    if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 255) {
        throw ParseError("unsupported PPM dimensions or maxval in " + path.string(), std::uint64_t(in.tellg()));
    }
    const auto payload_offset = std::uint64_t(in.tellg());
    Image img(width, height);
    std::vector<unsigned char> bytes(img.data.size());
    in.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
    if (in.gcount() != std::streamsize(bytes.size())) {
        throw ParseError("truncated PPM payload in " + path.string(), payload_offset + std::uint64_t(in.gcount()));
    }
    for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = double(bytes[i]) / double(maxval);
    return img;
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

constexpr char kDepthMagic[8] = {'D', 'S', 'D', 'E', 'P', 'T', 'H', '1'};

} // namespace

void write_depth(const Plane& depth, const std::filesystem::path& path) {
    static_assert(std::endian::native == std::endian::little, "depth export assumes a little-endian host");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(kDepthMagic, 8);
    put_u32(out, std::uint32_t(depth.width));
    put_u32(out, std::uint32_t(depth.height));
    std::vector<float> values(depth.data.begin(), depth.data.end());
    out.write(reinterpret_cast<const char*>(values.data()), std::streamsize(values.size() * sizeof(float)));
    if (!out) throw IoError("failed writing " + path.string());
}

Plane read_depth(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    unsigned char header[16];
    in.read(reinterpret_cast<char*>(header), 16);
    if (in.gcount() != 16) throw ParseError("truncated depth header", std::uint64_t(in.gcount()));
    if (std::memcmp(header, kDepthMagic, 8) != 0) throw ParseError("bad depth magic", 0);
    Plane plane(int(get_u32(header + 8)), int(get_u32(header + 12)));
    std::vector<float> values(plane.data.size());
    in.read(reinterpret_cast<char*>(values.data()), std::streamsize(values.size() * sizeof(float)));
    if (in.gcount() != std::streamsize(values.size() * sizeof(float))) {
        throw ParseError("truncated depth payload", 16 + std::uint64_t(in.gcount()));
    }
    std::copy(values.begin(), values.end(), plane.data.begin());
    return plane;
}

} // namespace dreamscene
