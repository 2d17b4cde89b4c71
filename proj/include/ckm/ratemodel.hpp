#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ckm/errors.hpp"
#include "ckm/scene.hpp"

namespace ckm {

struct LinkBudget {
    double b_max_hz = 1e7;        // total bandwidth
    double p_max_w = 10.0;        // per-slot power budget
    double n0_w_per_hz = 4e-21;   // noise power spectral density
    double r_min_bps = 0.0;       // per-slot rate floor (0: inactive)
    double v_max_mps = 30.0;      // UAV speed limit
    double tau_s = 2.0;           // slot duration T/N
    double epsilon_alpha = 1e-6;  // bandwidth share floor
    double d_min_m = 20.0;        // obstacle clearance

    void validate(std::size_t n_uavs) const {
        if (b_max_hz <= 0 || p_max_w <= 0 || n0_w_per_hz <= 0 || v_max_mps <= 0 || tau_s <= 0 ||
            epsilon_alpha <= 0 || d_min_m < 0)
            throw std::invalid_argument("link budget fields must be positive");
        if (epsilon_alpha >= 1.0 / static_cast<double>(n_uavs))
            throw std::invalid_argument("epsilon_alpha must be below 1/M");
    }
};

// Shannon rate with a normalized bandwidth share.
inline double rate_bps(double alpha, double power_w, double gain_linear, const LinkBudget& budget) {
    const double band = alpha * budget.b_max_hz;
    return band * std::log2(1.0 + power_w * gain_linear / (budget.n0_w_per_hz * band));
}

inline double average_rate(const std::vector<double>& per_slot) {
    double sum = 0.0;
    for (double r : per_slot) sum += r;
    return per_slot.empty() ? 0.0 : sum / static_cast<double>(per_slot.size());
}

// Statistical-channel gain h = beta0 / d^2 with the 3-D BS distance.
inline double sc_gain(double x, double y, const EnvironmentScene& scene, double beta0) {
    const double dz = scene.uav_height_m - scene.bs_height_m;
    double d2 = (x - scene.bs_x_m) * (x - scene.bs_x_m) + (y - scene.bs_y_m) * (y - scene.bs_y_m) +
                dz * dz;
    const double floor2 = scene.resolution_m * scene.resolution_m / 4.0;
    if (d2 < 1e-24) d2 = floor2;
    return beta0 / d2;
}

// d h / d(x, y): -2 beta0 d^-4 times the horizontal offset from the BS.
inline std::pair<double, double> sc_gain_gradient(double x, double y, const EnvironmentScene& scene,
                                                  double beta0) {
    const double dz = scene.uav_height_m - scene.bs_height_m;
    double d2 = (x - scene.bs_x_m) * (x - scene.bs_x_m) + (y - scene.bs_y_m) * (y - scene.bs_y_m) +
                dz * dz;
    if (d2 < 1e-24) return {0.0, 0.0};
    const double f = -2.0 * beta0 / (d2 * d2);
    return {f * (x - scene.bs_x_m), f * (y - scene.bs_y_m)};
}

// Pick beta0 so the SC model matches the ground truth at the LoS cell nearest
// the map center.
inline double calibrate_beta0(const GroundTruthCkm& truth, const Tensor& los,
                              const EnvironmentScene& scene) {
    const double cx = scene.width_m / 2.0, cy = scene.depth_m / 2.0;
    double best = std::numeric_limits<double>::infinity();
    std::size_t br = 0, bc = 0;
    bool found = false;
    for (std::size_t r = 0; r < scene.rows(); ++r) {
        for (std::size_t c = 0; c < scene.cols(); ++c) {
            if (los.at(r, c) < 0.5) continue;
            const double dx = scene.cell_center_x(r) - cx;
            const double dy = scene.cell_center_y(c) - cy;
            const double d2 = dx * dx + dy * dy;
            if (d2 < best) {
                best = d2;
                br = r;
                bc = c;
                found = true;
            }
        }
    }
    if (!found) throw std::runtime_error("no LoS cell available for beta0 calibration");
    const double dz = scene.uav_height_m - scene.bs_height_m;
    const double dx = scene.cell_center_x(br) - scene.bs_x_m;
    const double dy = scene.cell_center_y(bc) - scene.bs_y_m;
    const double d2 = dx * dx + dy * dy + dz * dz;
    return truth.gains.at(br, bc) * d2;
}

// Joint decision state: trajectories, bandwidth shares, powers and the
// per-slot rates they imply.
struct PlanState {
    std::size_t n_uavs = 0;
    std::size_t n_slots = 0;
    std::vector<double> qx, qy;       // [M*N] meters
    std::vector<double> alpha, power;  // [M*N]
    std::vector<double> predicted_rates;  // [M*N] bits/s, from the planner's gain model
    std::vector<double> truth_rates;      // [M*N] bits/s, from the ground-truth map

    std::size_t idx(std::size_t m, std::size_t n) const { return m * n_slots + n; }

    static PlanState sized(std::size_t m, std::size_t n) {
        PlanState p;
        p.n_uavs = m;
        p.n_slots = n;
        p.qx.assign(m * n, 0.0);
        p.qy.assign(m * n, 0.0);
        p.alpha.assign(m * n, 0.0);
        p.power.assign(m * n, 0.0);
        p.predicted_rates.assign(m * n, 0.0);
        p.truth_rates.assign(m * n, 0.0);
        return p;
    }
};

// Independent feasibility check of (7a)-(7f); returns human-readable
// violations, empty when the plan is feasible.
inline std::vector<std::string> check_plan(const PlanState& plan, const LinkBudget& budget,
                                           const EnvironmentScene& scene, double tol = 1e-9) {
    std::vector<std::string> bad;
    const std::size_t m_count = plan.n_uavs, n_count = plan.n_slots;
    for (std::size_t n = 0; n < n_count; ++n) {
        double sum_a = 0.0, sum_p = 0.0;
        for (std::size_t m = 0; m < m_count; ++m) {
            const std::size_t i = plan.idx(m, n);
            sum_a += plan.alpha[i];
            sum_p += plan.power[i];
            if (plan.alpha[i] < budget.epsilon_alpha - tol || plan.alpha[i] > 1.0 + tol)
                bad.push_back("alpha range violated at m=" + std::to_string(m) + " n=" + std::to_string(n));
            if (plan.power[i] < -tol)
                bad.push_back("negative power at m=" + std::to_string(m) + " n=" + std::to_string(n));
        }
        if (std::abs(sum_a - 1.0) > tol) bad.push_back("bandwidth shares do not sum to 1 at n=" + std::to_string(n));
        if (std::abs(sum_p - budget.p_max_w) > tol * std::max(1.0, budget.p_max_w))
            bad.push_back("powers do not sum to P_max at n=" + std::to_string(n));
    }
    const double step_max = budget.v_max_mps * budget.tau_s;
    for (std::size_t m = 0; m < m_count; ++m) {
        for (std::size_t n = 0; n + 1 < n_count; ++n) {
            const double dx = plan.qx[plan.idx(m, n + 1)] - plan.qx[plan.idx(m, n)];
            const double dy = plan.qy[plan.idx(m, n + 1)] - plan.qy[plan.idx(m, n)];
            if (std::hypot(dx, dy) > step_max + tol * std::max(1.0, step_max))
                bad.push_back("speed limit violated at m=" + std::to_string(m) + " n=" + std::to_string(n));
        }
        for (std::size_t n = 0; n < n_count; ++n) {
            const double x = plan.qx[plan.idx(m, n)], y = plan.qy[plan.idx(m, n)];
            if (x < -tol || x > scene.width_m + tol || y < -tol || y > scene.depth_m + tol)
                bad.push_back("position outside extent at m=" + std::to_string(m) + " n=" + std::to_string(n));
            for (std::size_t k = 0; k < scene.obstacles.size(); ++k) {
                const Obstacle& o = scene.obstacles[k];
                const double clear = std::hypot(x - o.cx_m, y - o.cy_m) - o.radius_m;
                if (clear < budget.d_min_m - tol * std::max(1.0, budget.d_min_m))
                    bad.push_back("obstacle clearance violated at m=" + std::to_string(m) +
                                  " n=" + std::to_string(n) + " k=" + std::to_string(k));
            }
        }
    }
    return bad;
}

// Headline metric: per-slot gains read from the nearest ground-truth cell,
// minimum over UAVs of the slot-averaged rate. Infeasible plans are rejected
// with the full violation list.
inline double evaluate_plan_on_truth(PlanState& plan, const GroundTruthCkm& truth,
                                     const EnvironmentScene& scene, const LinkBudget& budget) {
    const auto violations = check_plan(plan, budget, scene);
    if (!violations.empty()) {
        std::string msg = "infeasible plan:";
        for (const auto& v : violations) msg += "\n  " + v;
        throw InfeasibleError(msg);
    }
    double min_avg = std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < plan.n_uavs; ++m) {
        double sum = 0.0;
        for (std::size_t n = 0; n < plan.n_slots; ++n) {
            const std::size_t i = plan.idx(m, n);
            const double gain = truth.gains.at(scene.nearest_row(plan.qx[i]), scene.nearest_col(plan.qy[i]));
            plan.truth_rates[i] = rate_bps(plan.alpha[i], plan.power[i], gain, budget);
            sum += plan.truth_rates[i];
        }
        min_avg = std::min(min_avg, sum / static_cast<double>(plan.n_slots));
    }
    return min_avg;
}

// ---------------------------------------------------------------------------
// Plan JSON: decisions, budget, and both rate tables
// ---------------------------------------------------------------------------

inline nlohmann::json plan_to_json(const PlanState& plan, const LinkBudget& budget) {
    nlohmann::json j;
    j["n_uavs"] = plan.n_uavs;
    j["n_slots"] = plan.n_slots;
    auto emit = [&](const char* key, const std::vector<double>& v) {
        auto& arr = j[key] = nlohmann::json::array();
        for (std::size_t m = 0; m < plan.n_uavs; ++m) {
            nlohmann::json row = nlohmann::json::array();
            for (std::size_t n = 0; n < plan.n_slots; ++n) row.push_back(v[plan.idx(m, n)]);
            arr.push_back(row);
        }
    };
    emit("qx_m", plan.qx);
    emit("qy_m", plan.qy);
    emit("alpha", plan.alpha);
    emit("power_w", plan.power);
    emit("predicted_rates_bps", plan.predicted_rates);
    emit("truth_rates_bps", plan.truth_rates);
    j["budget"] = {{"b_max_hz", budget.b_max_hz},     {"p_max_w", budget.p_max_w},
                   {"n0_w_per_hz", budget.n0_w_per_hz}, {"r_min_bps", budget.r_min_bps},
                   {"v_max_mps", budget.v_max_mps},   {"tau_s", budget.tau_s},
                   {"epsilon_alpha", budget.epsilon_alpha}, {"d_min_m", budget.d_min_m}};
    return j;
}

inline PlanState plan_from_json(const nlohmann::json& j, LinkBudget* budget_out = nullptr) {
    PlanState plan = PlanState::sized(j.at("n_uavs").get<std::size_t>(), j.at("n_slots").get<std::size_t>());
    auto read = [&](const char* key, std::vector<double>& v) {
        const auto& arr = j.at(key);
        for (std::size_t m = 0; m < plan.n_uavs; ++m)
            for (std::size_t n = 0; n < plan.n_slots; ++n) v[plan.idx(m, n)] = arr[m][n].get<double>();
    };
    read("qx_m", plan.qx);
    read("qy_m", plan.qy);
    read("alpha", plan.alpha);
    read("power_w", plan.power);
    read("predicted_rates_bps", plan.predicted_rates);
    read("truth_rates_bps", plan.truth_rates);
    if (budget_out) {
        const auto& b = j.at("budget");
        budget_out->b_max_hz = b.at("b_max_hz").get<double>();
        budget_out->p_max_w = b.at("p_max_w").get<double>();
        budget_out->n0_w_per_hz = b.at("n0_w_per_hz").get<double>();
        budget_out->r_min_bps = b.at("r_min_bps").get<double>();
        budget_out->v_max_mps = b.at("v_max_mps").get<double>();
        budget_out->tau_s = b.at("tau_s").get<double>();
        budget_out->epsilon_alpha = b.at("epsilon_alpha").get<double>();
        budget_out->d_min_m = b.at("d_min_m").get<double>();
    }
    return plan;
}

inline void save_plan(const std::string& path, const PlanState& plan, const LinkBudget& budget) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open plan file for writing: " + path);
    os << plan_to_json(plan, budget).dump(2) << "\n";
}

}  // namespace ckm
