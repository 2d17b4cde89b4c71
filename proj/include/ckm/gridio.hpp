#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ckm/tensor.hpp"

namespace ckm {

// `.grid` files hold row-major little-endian IEEE-754 single precision
// values; the JSON sidecar at <path>.json carries the dimensions and units.

namespace detail {

inline void put_f32_le(std::ostream& os, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline float get_f32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

inline void write_payload(const std::string& path, const std::vector<double>& values) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open grid file for writing: " + path);
    for (double v : values) put_f32_le(os, static_cast<float>(v));
    if (!os) throw std::runtime_error("grid write failed: " + path);
}

inline std::vector<double> read_payload(const std::string& path, std::size_t count) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open grid file: " + path);
    std::vector<double> values(count);
    for (auto& v : values) v = static_cast<double>(get_f32_le(is));
    if (!is) throw std::runtime_error("truncated grid file: " + path);
    return values;
}

inline void write_sidecar(const std::string& path, const nlohmann::json& j) {
    std::ofstream os(path + ".json");
    if (!os) throw std::runtime_error("cannot open sidecar for writing: " + path + ".json");
    os << j.dump(2) << "\n";
}

inline nlohmann::json read_sidecar(const std::string& path) {
    std::ifstream is(path + ".json");
    if (!is) throw std::runtime_error("missing grid sidecar: " + path + ".json");
    nlohmann::json j;
    is >> j;
    return j;
}

}  // namespace detail

inline void write_grid(const std::string& path, const Tensor& grid, double resolution_m,
                       const std::string& quantity, const std::string& units) {
    if (grid.shape.size() != 2) throw std::invalid_argument("write_grid: expected 2-D tensor");
    detail::write_payload(path, grid.data);
    detail::write_sidecar(path, {{"rows", grid.shape[0]},
                                 {"cols", grid.shape[1]},
                                 {"resolution_m", resolution_m},
                                 {"quantity", quantity},
                                 {"units", units}});
}

inline Tensor read_grid(const std::string& path, nlohmann::json* sidecar_out = nullptr) {
    const nlohmann::json side = detail::read_sidecar(path);
    const auto rows = side.at("rows").get<std::size_t>();
    const auto cols = side.at("cols").get<std::size_t>();
    Tensor t({rows, cols});
    t.data = detail::read_payload(path, rows * cols);
    if (sidecar_out) *sidecar_out = side;
    return t;
}

// 3-D variant used for feature stacks; channel names are part of the format.
inline void write_grid3(const std::string& path, const Tensor& stack, double resolution_m,
                        const std::vector<std::string>& channel_names) {
    if (stack.shape.size() != 3) throw std::invalid_argument("write_grid3: expected 3-D tensor");
    if (channel_names.size() != stack.shape[0])
        throw std::invalid_argument("write_grid3: channel name count mismatch");
    detail::write_payload(path, stack.data);
    detail::write_sidecar(path, {{"channels", stack.shape[0]},
                                 {"rows", stack.shape[1]},
                                 {"cols", stack.shape[2]},
                                 {"resolution_m", resolution_m},
                                 {"channel_names", channel_names}});
}

inline Tensor read_grid3(const std::string& path, nlohmann::json* sidecar_out = nullptr) {
    const nlohmann::json side = detail::read_sidecar(path);
    const auto channels = side.at("channels").get<std::size_t>();
    const auto rows = side.at("rows").get<std::size_t>();
    const auto cols = side.at("cols").get<std::size_t>();
    Tensor t({channels, rows, cols});
    t.data = detail::read_payload(path, channels * rows * cols);
    if (sidecar_out) *sidecar_out = side;
    return t;
}

}  // namespace ckm
