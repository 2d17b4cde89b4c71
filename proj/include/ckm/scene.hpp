#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ckm/errors.hpp"
#include "ckm/rng.hpp"
#include "ckm/tensor.hpp"

namespace ckm {

inline constexpr double kSpeedOfLight = 299792458.0;

// Axis-aligned building footprint, snapped to whole grid cells.
struct Building {
    std::size_t row0 = 0, col0 = 0, rows = 0, cols = 0;
    double height_m = 0.0;
};

struct Obstacle {
    double cx_m = 0.0, cy_m = 0.0;
    double radius_m = 0.0;
};

// World model: building-height grid plus BS pose and flight altitude.
// Rows index the x axis, columns the y axis; cell centers sit at
// ((row+0.5)*res, (col+0.5)*res).
struct EnvironmentScene {
    double width_m = 0.0;
    double depth_m = 0.0;
    double resolution_m = 1.0;
    Tensor heights;  // [rows x cols] building height in meters
    std::vector<Building> buildings;
    std::vector<Obstacle> obstacles;
    double bs_x_m = 0.0, bs_y_m = 0.0;
    double bs_height_m = 25.0;
    double uav_height_m = 100.0;
    std::uint64_t rng_seed = 0;

    std::size_t rows() const { return heights.shape[0]; }
    std::size_t cols() const { return heights.shape[1]; }

    double cell_center_x(std::size_t row) const { return (static_cast<double>(row) + 0.5) * resolution_m; }
    double cell_center_y(std::size_t col) const { return (static_cast<double>(col) + 0.5) * resolution_m; }

    std::size_t nearest_row(double x) const {
        const auto r = static_cast<long long>(std::floor(x / resolution_m));
        return static_cast<std::size_t>(std::clamp<long long>(r, 0, static_cast<long long>(rows()) - 1));
    }
    std::size_t nearest_col(double y) const {
        const auto c = static_cast<long long>(std::floor(y / resolution_m));
        return static_cast<std::size_t>(std::clamp<long long>(c, 0, static_cast<long long>(cols()) - 1));
    }

    // 0 when the cell carries no generated building (hand-made scenes).
    int building_id_at(std::size_t row, std::size_t col) const {
        for (std::size_t b = 0; b < buildings.size(); ++b) {
            const Building& f = buildings[b];
            if (row >= f.row0 && row < f.row0 + f.rows && col >= f.col0 && col < f.col0 + f.cols)
                return static_cast<int>(b) + 1;
        }
        return 0;
    }
};

// Expected aggregate channel power gain toward the BS, per grid cell.
struct GroundTruthCkm {
    Tensor gains;     // linear power gain, > 0
    Tensor gains_db;  // 10*log10(gains)
    double frequency_hz = 0.0;
};

namespace detail {

// One cell crossed by the 2-D segment, with the parametric interval the
// segment spends inside it. Corner touches get a degenerate interval.
struct CrossedCell {
    std::size_t row, col;
    double t_in, t_out;
};

// Supercover walk from (ax,ay) to (bx,by), both in meters. Every cell the
// segment passes through is visited, including both cells at corner hits.
inline std::vector<CrossedCell> traverse_cells(const EnvironmentScene& scene, double ax, double ay,
                                               double bx, double by) {
    const double res = scene.resolution_m;
    const long long nr = static_cast<long long>(scene.rows());
    const long long nc = static_cast<long long>(scene.cols());
    const double ux = ax / res, uy = ay / res;  // cell-space coordinates
    const double vx = bx / res, vy = by / res;
    const double dx = vx - ux, dy = vy - uy;

    auto clamp_cell = [](long long c, long long n) { return std::clamp<long long>(c, 0, n - 1); };
    long long cr = clamp_cell(static_cast<long long>(std::floor(ux)), nr);
    long long cc = clamp_cell(static_cast<long long>(std::floor(uy)), nc);
    const long long er = clamp_cell(static_cast<long long>(std::floor(vx)), nr);
    const long long ec = clamp_cell(static_cast<long long>(std::floor(vy)), nc);

    std::vector<CrossedCell> out;
    const int sx = dx > 0 ? 1 : (dx < 0 ? -1 : 0);
    const int sy = dy > 0 ? 1 : (dy < 0 ? -1 : 0);
    const double inf = std::numeric_limits<double>::infinity();
    auto boundary_t = [](double u, double d, long long c, int s) {
        if (s == 0) return std::numeric_limits<double>::infinity();
        const double edge = static_cast<double>(s > 0 ? c + 1 : c);
        return (edge - u) / d;
    };
    double t_max_x = boundary_t(ux, dx, cr, sx);
    double t_max_y = boundary_t(uy, dy, cc, sy);
    const double t_dx = sx != 0 ? std::abs(1.0 / dx) : inf;
    const double t_dy = sy != 0 ? std::abs(1.0 / dy) : inf;

    double t_prev = 0.0;
    const std::size_t guard = static_cast<std::size_t>(nr + nc) * 2 + 8;
    for (std::size_t step = 0; step <= guard; ++step) {
        const bool at_end = (cr == er && cc == ec);
        const double t_next = at_end ? 1.0 : std::min({t_max_x, t_max_y, 1.0});
        out.push_back({static_cast<std::size_t>(cr), static_cast<std::size_t>(cc), t_prev,
                       std::max(t_prev, t_next)});
        if (at_end || t_next >= 1.0) break;
        t_prev = t_next;
        if (std::abs(t_max_x - t_max_y) < 1e-12) {
            // corner hit: include both side cells, then move diagonally
            const long long r2 = clamp_cell(cr + sx, nr);
            const long long c2 = clamp_cell(cc + sy, nc);
            out.push_back({static_cast<std::size_t>(r2), static_cast<std::size_t>(cc), t_prev, t_prev});
            out.push_back({static_cast<std::size_t>(cr), static_cast<std::size_t>(c2), t_prev, t_prev});
            cr = r2;
            cc = c2;
            t_max_x += t_dx;
            t_max_y += t_dy;
        } else if (t_max_x < t_max_y) {
            cr = clamp_cell(cr + sx, nr);
            t_max_x += t_dx;
        } else {
            cc = clamp_cell(cc + sy, nc);
            t_max_y += t_dy;
        }
    }
    return out;
}

// Segment height is linear in t; a cell blocks when its building tops the
// lowest segment height across the cell.
inline bool cell_blocks(double building_h, double z0, double z1, double t_in, double t_out) {
    const double za = z0 + (z1 - z0) * t_in;
    const double zb = z0 + (z1 - z0) * t_out;
    return building_h > std::min(za, zb);
}

}  // namespace detail

// Binary LoS map: 1 where the BS-to-cell-center segment clears every building.
inline Tensor compute_los_map(const EnvironmentScene& scene) {
    Tensor los({scene.rows(), scene.cols()}, 1.0);
    const double z0 = scene.bs_height_m;
    const double z1 = scene.uav_height_m;
    for (std::size_t r = 0; r < scene.rows(); ++r) {
        for (std::size_t c = 0; c < scene.cols(); ++c) {
            const auto cells = detail::traverse_cells(scene, scene.bs_x_m, scene.bs_y_m,
                                                      scene.cell_center_x(r), scene.cell_center_y(c));
            for (const auto& cell : cells) {
                const double h = scene.heights.at(cell.row, cell.col);
                if (h > 0.0 && detail::cell_blocks(h, z0, z1, cell.t_in, cell.t_out)) {
                    los.at(r, c) = 0.0;
                    break;
                }
            }
        }
    }
    return los;
}

namespace detail {

// Number of distinct blockers on the segment: consecutive blocked cells that
// belong to the same building count once.
inline int count_blocking_buildings(const EnvironmentScene& scene, double bx, double by, double tx,
                                    double ty) {
    const auto cells = traverse_cells(scene, bx, by, tx, ty);
    int count = 0;
    bool prev_blocked = false;
    int prev_id = 0;
    for (const auto& cell : cells) {
        const double h = scene.heights.at(cell.row, cell.col);
        const bool blocked =
            h > 0.0 && cell_blocks(h, scene.bs_height_m, scene.uav_height_m, cell.t_in, cell.t_out);
        if (blocked) {
            const int id = scene.building_id_at(cell.row, cell.col);
            if (!prev_blocked || id != prev_id) ++count;
            prev_id = id;
        }
        prev_blocked = blocked;
    }
    return count;
}

}  // namespace detail

// Deterministic ground-truth channel oracle: free-space direct path with a
// per-blocking-building diffraction penalty, plus an optional single specular
// image path per building wall that faces both endpoints. The gain is the
// phase-averaged expected power, i.e. the sum of squared path amplitudes.
inline GroundTruthCkm compute_ground_truth_ckm(const EnvironmentScene& scene, double frequency_hz,
                                               int n_reflections, double reflection_coeff = 0.5,
                                               double diffraction_coeff = 0.1) {
    if (frequency_hz <= 0.0) throw std::invalid_argument("frequency must be positive");
    if (n_reflections != 0 && n_reflections != 1)
        throw std::invalid_argument("n_reflections must be 0 or 1");

    GroundTruthCkm ckm;
    ckm.frequency_hz = frequency_hz;
    ckm.gains = Tensor({scene.rows(), scene.cols()});
    ckm.gains_db = Tensor({scene.rows(), scene.cols()});

    const double amp_scale = kSpeedOfLight / (4.0 * 3.14159265358979323846 * frequency_hz);
    const double dz = scene.uav_height_m - scene.bs_height_m;
    const double d_floor = scene.resolution_m / 2.0;

    for (std::size_t r = 0; r < scene.rows(); ++r) {
        for (std::size_t c = 0; c < scene.cols(); ++c) {
            const double tx = scene.cell_center_x(r);
            const double ty = scene.cell_center_y(c);
            double d0 = std::sqrt((tx - scene.bs_x_m) * (tx - scene.bs_x_m) +
                                  (ty - scene.bs_y_m) * (ty - scene.bs_y_m) + dz * dz);
            if (d0 < 1e-12) d0 = d_floor;
            const int blockers = detail::count_blocking_buildings(scene, scene.bs_x_m, scene.bs_y_m, tx, ty);
            const double a0 = amp_scale / d0 * std::pow(diffraction_coeff, blockers);
            double power = a0 * a0;

            if (n_reflections == 1) {
                for (const Building& b : scene.buildings) {
                    const double x_lo = static_cast<double>(b.row0) * scene.resolution_m;
                    const double x_hi = static_cast<double>(b.row0 + b.rows) * scene.resolution_m;
                    const double y_lo = static_cast<double>(b.col0) * scene.resolution_m;
                    const double y_hi = static_cast<double>(b.col0 + b.cols) * scene.resolution_m;
                    // wall planes: {x=x_lo,-}, {x=x_hi,+}, {y=y_lo,-}, {y=y_hi,+}
                    const struct {
                        double plane;
                        bool along_x;
                        int side;  // -1: both points below plane, +1: above
                    } walls[4] = {{x_lo, true, -1}, {x_hi, true, +1}, {y_lo, false, -1}, {y_hi, false, +1}};
                    for (const auto& w : walls) {
                        const double pb = w.along_x ? scene.bs_x_m : scene.bs_y_m;
                        const double pt = w.along_x ? tx : ty;
                        const bool faces = w.side < 0 ? (pb < w.plane && pt < w.plane)
                                                      : (pb > w.plane && pt > w.plane);
                        if (!faces) continue;
                        const double img_x = w.along_x ? 2.0 * w.plane - scene.bs_x_m : scene.bs_x_m;
                        const double img_y = w.along_x ? scene.bs_y_m : 2.0 * w.plane - scene.bs_y_m;
                        double dl = std::sqrt((tx - img_x) * (tx - img_x) + (ty - img_y) * (ty - img_y) +
                                              dz * dz);
                        if (dl < 1e-12) dl = d_floor;
                        const double al = reflection_coeff * amp_scale / dl;
                        power += al * al;
                    }
                }
            }
            ckm.gains.at(r, c) = power;
            ckm.gains_db.at(r, c) = 10.0 * std::log10(power);
        }
    }
    return ckm;
}

// Seeded synthetic scene: disjoint axis-aligned buildings, BS on a free cell.
inline EnvironmentScene generate_scene(std::uint64_t seed, double extent_m, double resolution_m,
                                       std::size_t building_count,
                                       double min_height_m = 10.0, double max_height_m = 60.0,
                                       double bs_height_m = 25.0, double uav_height_m = 100.0) {
    const double cells_d = extent_m / resolution_m;
    const auto n = static_cast<std::size_t>(std::llround(cells_d));
    if (n == 0 || std::abs(cells_d - static_cast<double>(n)) > 1e-9)
        throw std::invalid_argument("extent must be an integer multiple of resolution");
    if (max_height_m < min_height_m) throw std::invalid_argument("bad height range");

    EnvironmentScene scene;
    scene.width_m = extent_m;
    scene.depth_m = extent_m;
    scene.resolution_m = resolution_m;
    scene.heights = Tensor({n, n});
    scene.bs_height_m = bs_height_m;
    scene.uav_height_m = uav_height_m;
    scene.rng_seed = seed;

    Rng rng(seed);
    const std::size_t side_lo = std::max<std::size_t>(2, n / 32);
    const std::size_t side_hi = std::max(side_lo + 1, n / 8);
    std::size_t attempts = 0;
    while (scene.buildings.size() < building_count) {
        if (attempts >= 10 * building_count) throw std::runtime_error("scene too dense");
        ++attempts;
        Building b;
        b.rows = side_lo + rng.uniform_index(side_hi - side_lo + 1);
        b.cols = side_lo + rng.uniform_index(side_hi - side_lo + 1);
        if (b.rows >= n || b.cols >= n) continue;
        b.row0 = rng.uniform_index(n - b.rows + 1);
        b.col0 = rng.uniform_index(n - b.cols + 1);
        b.height_m = rng.uniform(min_height_m, max_height_m);
        bool overlaps = false;
        for (const Building& e : scene.buildings) {
            const bool sep = b.row0 + b.rows <= e.row0 || e.row0 + e.rows <= b.row0 ||
                             b.col0 + b.cols <= e.col0 || e.col0 + e.cols <= b.col0;
            if (!sep) {
                overlaps = true;
                break;
            }
        }
        if (overlaps) continue;
        scene.buildings.push_back(b);
        for (std::size_t r = b.row0; r < b.row0 + b.rows; ++r)
            for (std::size_t c = b.col0; c < b.col0 + b.cols; ++c)
                scene.heights.at(r, c) = b.height_m;
    }

    // obstacle disks circumscribe the footprints
    for (const Building& b : scene.buildings) {
        Obstacle o;
        o.cx_m = (static_cast<double>(b.row0) + static_cast<double>(b.rows) / 2.0) * resolution_m;
        o.cy_m = (static_cast<double>(b.col0) + static_cast<double>(b.cols) / 2.0) * resolution_m;
        o.radius_m = 0.5 * std::hypot(static_cast<double>(b.rows) * resolution_m,
                                      static_cast<double>(b.cols) * resolution_m);
        scene.obstacles.push_back(o);
    }

    // BS on a seeded free cell
    std::size_t bs_row = 0, bs_col = 0;
    bool found = false;
    for (std::size_t tries = 0; tries < 64 * (building_count + 1); ++tries) {
        const std::size_t r = rng.uniform_index(n);
        const std::size_t c = rng.uniform_index(n);
        if (scene.heights.at(r, c) == 0.0) {
            bs_row = r;
            bs_col = c;
            found = true;
            break;
        }
    }
    if (!found) {
        for (std::size_t r = 0; r < n && !found; ++r)
            for (std::size_t c = 0; c < n && !found; ++c)
                if (scene.heights.at(r, c) == 0.0) {
                    bs_row = r;
                    bs_col = c;
                    found = true;
                }
    }
    if (!found) throw std::runtime_error("scene too dense");
    scene.bs_x_m = scene.cell_center_x(bs_row);
    scene.bs_y_m = scene.cell_center_y(bs_col);
    return scene;
}

// ---------------------------------------------------------------------------
// Scene JSON round trip
// ---------------------------------------------------------------------------

inline nlohmann::json scene_to_json(const EnvironmentScene& scene) {
    nlohmann::json j;
    j["width_m"] = scene.width_m;
    j["depth_m"] = scene.depth_m;
    j["resolution_m"] = scene.resolution_m;
    j["rows"] = scene.rows();
    j["cols"] = scene.cols();
    j["heights"] = scene.heights.data;
    j["bs_xy"] = {scene.bs_x_m, scene.bs_y_m};
    j["bs_height_m"] = scene.bs_height_m;
    j["uav_height_m"] = scene.uav_height_m;
    j["rng_seed"] = scene.rng_seed;
    auto& bl = j["buildings"] = nlohmann::json::array();
    for (const Building& b : scene.buildings)
        bl.push_back({{"row0", b.row0}, {"col0", b.col0}, {"rows", b.rows}, {"cols", b.cols},
                      {"height_m", b.height_m}});
    auto& ol = j["obstacles"] = nlohmann::json::array();
    for (const Obstacle& o : scene.obstacles)
        ol.push_back({{"center_xy", {o.cx_m, o.cy_m}}, {"radius_m", o.radius_m}});
    return j;
}

inline EnvironmentScene scene_from_json(const nlohmann::json& j) {
    EnvironmentScene scene;
    scene.width_m = j.at("width_m").get<double>();
    scene.depth_m = j.at("depth_m").get<double>();
    scene.resolution_m = j.at("resolution_m").get<double>();
    const auto rows = j.at("rows").get<std::size_t>();
    const auto cols = j.at("cols").get<std::size_t>();
    scene.heights = Tensor({rows, cols});
    scene.heights.data = j.at("heights").get<std::vector<double>>();
    if (scene.heights.data.size() != rows * cols) throw std::runtime_error("scene heights size mismatch");
    scene.bs_x_m = j.at("bs_xy")[0].get<double>();
    scene.bs_y_m = j.at("bs_xy")[1].get<double>();
    scene.bs_height_m = j.at("bs_height_m").get<double>();
    scene.uav_height_m = j.at("uav_height_m").get<double>();
    scene.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    for (const auto& b : j.at("buildings"))
        scene.buildings.push_back({b.at("row0").get<std::size_t>(), b.at("col0").get<std::size_t>(),
                                   b.at("rows").get<std::size_t>(), b.at("cols").get<std::size_t>(),
                                   b.at("height_m").get<double>()});
    for (const auto& o : j.at("obstacles"))
        scene.obstacles.push_back({o.at("center_xy")[0].get<double>(), o.at("center_xy")[1].get<double>(),
                                   o.at("radius_m").get<double>()});
    return scene;
}

inline void save_scene(const std::string& path, const EnvironmentScene& scene) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open scene file for writing: " + path);
    os << scene_to_json(scene).dump(2) << "\n";
}

inline EnvironmentScene load_scene(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open scene file: " + path);
    nlohmann::json j;
    is >> j;
    return scene_from_json(j);
}

}  // namespace ckm
