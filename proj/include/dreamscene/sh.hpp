#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <span>

namespace dreamscene {

inline constexpr double kShC0 = 0.28209479177387814;
inline constexpr int kMaxShDegree = 3;

constexpr int sh_coefficient_count(int degree) { return (degree + 1) * (degree + 1); }

inline double rgb_to_sh_dc(double value) { return (value - 0.5) / kShC0; }
inline double sh_dc_to_rgb(double coeff) { return kShC0 * coeff + 0.5; }

/// Real spherical-harmonic basis in the ordering and sign convention used by
/// common splatting viewers. Writes (degree+1)^2 values for a unit direction.
void eval_sh_basis(int degree, const Eigen::Vector3d& dir, std::span<double> out);

/// Evaluates view-dependent color (before the 0.5 offset and clamping) for one
/// Gaussian. `coeffs` holds (degree+1)^2 triplets laid out [k][channel].
Eigen::Vector3d eval_sh_color(int degree, std::span<const double> coeffs, const Eigen::Vector3d& dir);

/// Rotates SH coefficients so that the rotated function f'(d) equals f(R^T d).
/// Band 0 is left untouched. Coefficients are laid out [k][channel].
void rotate_sh(int degree, const Eigen::Matrix3d& rotation, std::span<double> coeffs);

} // namespace dreamscene
