#pragma once

#include "dreamscene/gaussian_cloud.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>

namespace dreamscene {

/// Binary little-endian PLY using the property names common to splatting
/// tools: x y z nx ny nz f_dc_* f_rest_* opacity scale_* rot_*. Clouds with
/// frozen rows or group tags additionally carry uchar `frozen` and `group`.
void ply_write(const GaussianCloud& cloud, const std::filesystem::path& path);
void ply_write(const GaussianCloud& cloud, std::ostream& out);

/// Throws ParseError (with byte offset) on malformed headers, missing
/// properties or truncated payloads, IoError when the file cannot be opened.
GaussianCloud ply_read(const std::filesystem::path& path);
GaussianCloud ply_read_buffer(const std::string& bytes);

} // namespace dreamscene
