#include "dreamscene/ply.hpp"

#include "dreamscene/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

namespace dreamscene {

static_assert(std::endian::native == std::endian::little, "PLY I/O assumes a little-endian host");

namespace {

bool needs_tags(const GaussianCloud& cloud) {
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (cloud.frozen[i] || cloud.groups[i] != GaussianGroup::none) return true;
    }
    return false;
}

template <typename T>
void put(std::string& buf, T value) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    buf.append(bytes, sizeof(T));
}

enum class ScalarType { f32, f64, u8, i8, u16, i16, u32, i32 };

std::optional<ScalarType> parse_type(const std::string& name) {
    static const std::map<std::string, ScalarType> types = {
        {"float", ScalarType::f32},  {"float32", ScalarType::f32}, {"double", ScalarType::f64},
        {"float64", ScalarType::f64}, {"uchar", ScalarType::u8},    {"uint8", ScalarType::u8},
        {"char", ScalarType::i8},    {"int8", ScalarType::i8},     {"ushort", ScalarType::u16},
        {"uint16", ScalarType::u16}, {"short", ScalarType::i16},   {"int16", ScalarType::i16},
        {"uint", ScalarType::u32},   {"uint32", ScalarType::u32},  {"int", ScalarType::i32},
        {"int32", ScalarType::i32},
    };
    const auto it = types.find(name);
    if (it == types.end()) return std::nullopt;
    return it->second;
}

std::size_t type_size(ScalarType t) {
    switch (t) {
    case ScalarType::f64: return 8;
    case ScalarType::f32:
    case ScalarType::u32:
    case ScalarType::i32: return 4;
    case ScalarType::u16:
    case ScalarType::i16: return 2;
    default: return 1;
    }
}

double read_scalar(const char* p, ScalarType t) {
    switch (t) {
    case ScalarType::f32: { float v; std::memcpy(&v, p, 4); return v; }
    case ScalarType::f64: { double v; std::memcpy(&v, p, 8); return v; }
    case ScalarType::u8: return double(static_cast<unsigned char>(*p));
    case ScalarType::i8: return double(static_cast<signed char>(*p));
    case ScalarType::u16: { std::uint16_t v; std::memcpy(&v, p, 2); return v; }
    case ScalarType::i16: { std::int16_t v; std::memcpy(&v, p, 2); return v; }
    case ScalarType::u32: { std::uint32_t v; std::memcpy(&v, p, 4); return v; }
    case ScalarType::i32: { std::int32_t v; std::memcpy(&v, p, 4); return v; }
    }
    return 0.0;
}

struct Property {
    std::string name;
    ScalarType type;
    std::size_t offset;
};

} // namespace

void ply_write(const GaussianCloud& cloud, std::ostream& out) {
    cloud.validate();
    const int rest = cloud.coeffs_per_gaussian() - 1;
    const bool tags = needs_tags(cloud);
    std::ostringstream header;
    header << "ply\nformat binary_little_endian 1.0\nelement vertex " << cloud.size() << "\n";
    for (const char* name : {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"}) {
        header << "property float " << name << "\n";
    }
    for (int k = 0; k < 3 * rest; ++k) header << "property float f_rest_" << k << "\n";
    header << "property float opacity\n";
    for (int k = 0; k < 3; ++k) header << "property float scale_" << k << "\n";
    for (int k = 0; k < 4; ++k) header << "property float rot_" << k << "\n";
    if (tags) header << "property uchar frozen\nproperty uchar group\n";
    header << "end_header\n";

    std::string buf = header.str();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto& m = cloud.means[i];
        put<float>(buf, float(m.x()));
        put<float>(buf, float(m.y()));
        put<float>(buf, float(m.z()));
        for (int k = 0; k < 3; ++k) put<float>(buf, 0.0f);
        const auto sh = cloud.sh_of(i);
        for (int c = 0; c < 3; ++c) put<float>(buf, float(sh[c]));
        // f_rest is channel-major: all red rest coefficients, then green, then blue.
        for (int c = 0; c < 3; ++c)
            for (int k = 1; k <= rest; ++k) put<float>(buf, float(sh[3 * k + c]));
        put<float>(buf, float(cloud.opacity_logits[i]));
        for (int k = 0; k < 3; ++k) put<float>(buf, float(cloud.log_scales[i][k]));
        const auto& q = cloud.rotations[i];
        put<float>(buf, float(q.w()));
        put<float>(buf, float(q.x()));
        put<float>(buf, float(q.y()));
        put<float>(buf, float(q.z()));
        if (tags) {
            put<unsigned char>(buf, cloud.frozen[i]);
            put<unsigned char>(buf, static_cast<unsigned char>(cloud.groups[i]));
        }
    }
    out.write(buf.data(), std::streamsize(buf.size()));
}

void ply_write(const GaussianCloud& cloud, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    ply_write(cloud, out);
    if (!out) throw IoError("failed writing " + path.string());
}

GaussianCloud ply_read_buffer(const std::string& bytes) {
    std::size_t pos = 0;
    auto next_line = [&](std::size_t& line_start) -> std::optional<std::string> {
        line_start = pos;
        const std::size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) return std::nullopt;
        std::string line = bytes.substr(pos, nl - pos);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        pos = nl + 1;
        return line;
    };

    std::size_t line_start = 0;
    auto line = next_line(line_start);
    if (!line || *line != "ply") throw ParseError("missing 'ply' magic", 0);
    line = next_line(line_start);
    if (!line || *line != "format binary_little_endian 1.0") {
        throw ParseError("only 'format binary_little_endian 1.0' is supported", line_start);
    }

    std::optional<std::size_t> vertex_count;
    bool in_vertex = false;
    std::vector<Property> props;
    std::size_t stride = 0;
    for (;;) {
        line = next_line(line_start);
        if (!line) throw ParseError("header is not terminated by end_header", line_start);
        std::istringstream words(*line);
        std::string keyword;
        words >> keyword;
        if (keyword == "end_header") break;
        if (keyword == "comment" || keyword == "obj_info" || keyword.empty()) continue;
        if (keyword == "element") {
            std::string name;
            long long count = -1;
            words >> name >> count;
            if (!words || count < 0) throw ParseError("malformed element line", line_start);
            if (name == "vertex") {
                if (vertex_count) throw ParseError("duplicate vertex element", line_start);
                vertex_count = std::size_t(count);
                in_vertex = true;
            } else {
                if (count != 0) throw ParseError("unsupported non-empty element '" + name + "'", line_start);
                in_vertex = false;
            }
            continue;
        }
        if (keyword == "property") {
            std::string type_name, name;
            words >> type_name;
            if (type_name == "list") throw ParseError("list properties are not supported", line_start);
            words >> name;
            const auto type = parse_type(type_name);
            if (!words || !type) throw ParseError("malformed property line '" + *line + "'", line_start);
            if (!in_vertex) throw ParseError("property outside the vertex element", line_start);
            for (const auto& p : props) {
                if (p.name == name) throw ParseError("duplicate property '" + name + "'", line_start);
            }
            props.push_back({name, *type, stride});
            stride += type_size(*type);
            continue;
        }
        throw ParseError("unexpected header keyword '" + keyword + "'", line_start);
    }
    if (!vertex_count) throw ParseError("header has no vertex element", line_start);

    std::map<std::string, const Property*> by_name;
    for (const auto& p : props) by_name[p.name] = &p;
    auto require = [&](const std::string& name) -> const Property& {
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw ParseError("missing required property '" + name + "'", line_start);
        return *it->second;
    };

    int rest_count = 0;
    while (by_name.count("f_rest_" + std::to_string(rest_count))) ++rest_count;
    int degree = -1;
    for (int d = 0; d <= kMaxShDegree; ++d) {
        if (3 * (sh_coefficient_count(d) - 1) == rest_count) degree = d;
    }
    if (degree < 0) {
        throw ParseError("f_rest property count " + std::to_string(rest_count) + " matches no SH degree", line_start);
    }

    const Property* px = &require("x");
    const Property* py = &require("y");
    const Property* pz = &require("z");
    const Property* pdc[3] = {&require("f_dc_0"), &require("f_dc_1"), &require("f_dc_2")};
    std::vector<const Property*> prest(rest_count);
    for (int k = 0; k < rest_count; ++k) prest[k] = &require("f_rest_" + std::to_string(k));
    const Property* pop = &require("opacity");
    const Property* pscale[3] = {&require("scale_0"), &require("scale_1"), &require("scale_2")};
    const Property* prot[4] = {&require("rot_0"), &require("rot_1"), &require("rot_2"), &require("rot_3")};
    const Property* pfrozen = by_name.count("frozen") ? by_name["frozen"] : nullptr;
    const Property* pgroup = by_name.count("group") ? by_name["group"] : nullptr;

    const std::size_t payload = pos;
    const std::size_t needed = *vertex_count * stride;
    if (bytes.size() - payload < needed) {
        const std::size_t complete = (bytes.size() - payload) / std::max<std::size_t>(stride, 1);
        throw ParseError("truncated payload: expected " + std::to_string(*vertex_count) + " vertices, found " +
                             std::to_string(complete),
                         payload + complete * stride);
    }

    GaussianCloud cloud = make_empty_cloud(degree);
    const int per_channel = sh_coefficient_count(degree) - 1;
    for (std::size_t i = 0; i < *vertex_count; ++i) {
        const char* row = bytes.data() + payload + i * stride;
        auto get = [&](const Property* p) { return read_scalar(row + p->offset, p->type); };
        cloud.means.emplace_back(get(px), get(py), get(pz));
        cloud.log_scales.emplace_back(get(pscale[0]), get(pscale[1]), get(pscale[2]));
        Eigen::Quaterniond q(get(prot[0]), get(prot[1]), get(prot[2]), get(prot[3]));
        if (!(q.norm() > 0.0)) {
            throw ParseError("zero-norm rotation at vertex " + std::to_string(i), payload + i * stride);
        }
        cloud.rotations.push_back(q.normalized());
        cloud.opacity_logits.push_back(get(pop));
        const std::size_t base = cloud.sh.size();
        cloud.sh.resize(base + cloud.sh_stride(), 0.0);
        for (int c = 0; c < 3; ++c) cloud.sh[base + c] = get(pdc[c]);
        for (int c = 0; c < 3; ++c)
            for (int k = 1; k <= per_channel; ++k) cloud.sh[base + 3 * k + c] = get(prest[c * per_channel + (k - 1)]);
        cloud.frozen.push_back(pfrozen ? static_cast<std::uint8_t>(get(pfrozen) != 0.0) : 0);
        const int group = pgroup ? int(get(pgroup)) : 0;
        if (group < 0 || group > 3) {
            throw ParseError("invalid group tag at vertex " + std::to_string(i), payload + i * stride + pgroup->offset);
        }
        cloud.groups.push_back(static_cast<GaussianGroup>(group));
    }
    return cloud;
}

GaussianCloud ply_read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ply_read_buffer(ss.str());
}

} // namespace dreamscene
