#include "dreamscene/sh.hpp"

#include "dreamscene/error.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <vector>

namespace dreamscene {

namespace {

constexpr double kShC1 = 0.4886025119029199;
constexpr double kShC2[] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792,
                            0.5462742152960396};
constexpr double kShC3[] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
                            -0.4570457994644658, 1.445305721320277, -0.5900435899266435};

// Fibonacci-sphere directions; 64 samples overdetermine every band up to l=3.
const std::vector<Eigen::Vector3d>& probe_directions() {
    static const std::vector<Eigen::Vector3d> dirs = [] {
        constexpr int n = 64;
        std::vector<Eigen::Vector3d> out;
        out.reserve(n);
        const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
        for (int i = 0; i < n; ++i) {
            const double z = 1.0 - 2.0 * (i + 0.5) / n;
            const double r = std::sqrt(1.0 - z * z);
            const double phi = golden * i;
            out.emplace_back(r * std::cos(phi), r * std::sin(phi), z);
        }
        return out;
    }();
    return dirs;
}

} // namespace

void eval_sh_basis(int degree, const Eigen::Vector3d& dir, std::span<double> out) {
    if (degree < 0 || degree > kMaxShDegree) throw ValidationError("SH degree must be in 0..3");
    if (out.size() < std::size_t(sh_coefficient_count(degree))) throw ValidationError("SH output span too small");
    const double x = dir.x(), y = dir.y(), z = dir.z();
    out[0] = kShC0;
    if (degree < 1) return;
    out[1] = -kShC1 * y;
    out[2] = kShC1 * z;
    out[3] = -kShC1 * x;
    if (degree < 2) return;
    const double xx = x * x, yy = y * y, zz = z * z;
    const double xy = x * y, yz = y * z, xz = x * z;
    out[4] = kShC2[0] * xy;
    out[5] = kShC2[1] * yz;
    out[6] = kShC2[2] * (2.0 * zz - xx - yy);
    out[7] = kShC2[3] * xz;
    out[8] = kShC2[4] * (xx - yy);
    if (degree < 3) return;
    out[9] = kShC3[0] * y * (3.0 * xx - yy);
    out[10] = kShC3[1] * xy * z;
    out[11] = kShC3[2] * y * (4.0 * zz - xx - yy);
    out[12] = kShC3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = kShC3[4] * x * (4.0 * zz - xx - yy);
    out[14] = kShC3[5] * z * (xx - yy);
    out[15] = kShC3[6] * x * (xx - 3.0 * yy);
}

Eigen::Vector3d eval_sh_color(int degree, std::span<const double> coeffs, const Eigen::Vector3d& dir) {
    double basis[16];
    eval_sh_basis(degree, dir, basis);
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    const int count = sh_coefficient_count(degree);
    for (int k = 0; k < count; ++k) {
        color.x() += basis[k] * coeffs[3 * k + 0];
        color.y() += basis[k] * coeffs[3 * k + 1];
        color.z() += basis[k] * coeffs[3 * k + 2];
    }
    return color;
}

void rotate_sh(int degree, const Eigen::Matrix3d& rotation, std::span<double> coeffs) {
    if (degree == 0) return;
    const auto& dirs = probe_directions();
    const int count = sh_coefficient_count(degree);
    const int n = int(dirs.size());
    // Solve Y * D = Y_rot per band, where Y_rot samples the basis at R^T d.
    Eigen::MatrixXd basis(n, count), basis_rot(n, count);
    double row[16];
    for (int i = 0; i < n; ++i) {
        eval_sh_basis(degree, dirs[i], row);
        for (int k = 0; k < count; ++k) basis(i, k) = row[k];
        eval_sh_basis(degree, rotation.transpose() * dirs[i], row);
        for (int k = 0; k < count; ++k) basis_rot(i, k) = row[k];
    }
    for (int band = 1; band <= degree; ++band) {
        const int first = band * band;
        const int width = 2 * band + 1;
        const Eigen::MatrixXd y = basis.middleCols(first, width);
        const Eigen::MatrixXd y_rot = basis_rot.middleCols(first, width);
        const Eigen::MatrixXd mix = y.colPivHouseholderQr().solve(y_rot);
        for (int c = 0; c < 3; ++c) {
            Eigen::VectorXd old(width);
            for (int k = 0; k < width; ++k) old(k) = coeffs[3 * (first + k) + c];
            const Eigen::VectorXd updated = mix * old;
            for (int k = 0; k < width; ++k) coeffs[3 * (first + k) + c] = updated(k);
        }
    }
}

} // namespace dreamscene
