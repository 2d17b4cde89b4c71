#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ckm/errors.hpp"

namespace ckm {

// Linear inequality row.x <= rhs, stored sparse.
struct SparseRow {
    std::vector<std::pair<int, double>> terms;
    double rhs = 0.0;

    double dot(const Eigen::VectorXd& x) const {
        double v = 0.0;
        for (const auto& [i, a] : terms) v += a * x[i];
        return v;
    }
};

// ||G x_vars + g||_2 <= bound over a small variable subset.
struct SocConstraint {
    std::vector<int> vars;
    Eigen::MatrixXd coeff;  // k x vars.size()
    Eigen::VectorXd offset;
    double bound = 0.0;
};

enum class SolveStatus { Optimal, Infeasible, MaxIter };

inline const char* to_string(SolveStatus s) {
    switch (s) {
        case SolveStatus::Optimal: return "optimal";
        case SolveStatus::Infeasible: return "infeasible";
        case SolveStatus::MaxIter: return "max_iter";
    }
    return "?";
}

// Linear objective over linear-inequality, second-order-cone, box, and
// equality constraints. The objective is maximized.
struct ConeProgram {
    int n = 0;
    Eigen::VectorXd objective;
    Eigen::MatrixXd a_eq;  // a_eq x = b_eq (0 rows when absent)
    Eigen::VectorXd b_eq;
    std::vector<SparseRow> ineqs;
    std::vector<SocConstraint> socs;
    Eigen::VectorXd lo, hi;

    explicit ConeProgram(int vars) : n(vars) {
        objective = Eigen::VectorXd::Zero(n);
        a_eq.resize(0, n);
        b_eq.resize(0);
        lo = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
        hi = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
    }

    void add_inequality(std::vector<std::pair<int, double>> terms, double rhs) {
        ineqs.push_back({std::move(terms), rhs});
    }

    void add_equality(const std::vector<std::pair<int, double>>& terms, double rhs) {
        const Eigen::Index r = a_eq.rows();
        a_eq.conservativeResize(r + 1, n);
        a_eq.row(r).setZero();
        for (const auto& [i, a] : terms) a_eq(r, i) = a;
        b_eq.conservativeResize(r + 1);
        b_eq[r] = rhs;
    }

    // ||x[a] - x[b]|| <= bound for 2-D index pairs; b entries of -1 read as 0.
    void add_soc_pair(int ax, int bx, int ay, int by, double bound, double off_x = 0.0,
                      double off_y = 0.0) {
        SocConstraint s;
        for (int v : {ax, bx, ay, by})
            if (v >= 0 && std::find(s.vars.begin(), s.vars.end(), v) == s.vars.end())
                s.vars.push_back(v);
        s.coeff = Eigen::MatrixXd::Zero(2, static_cast<Eigen::Index>(s.vars.size()));
        s.offset = Eigen::Vector2d(off_x, off_y);
        auto col = [&](int v) {
            return static_cast<Eigen::Index>(std::find(s.vars.begin(), s.vars.end(), v) - s.vars.begin());
        };
        if (ax >= 0) s.coeff(0, col(ax)) += 1.0;
        if (bx >= 0) s.coeff(0, col(bx)) -= 1.0;
        if (ay >= 0) s.coeff(1, col(ay)) += 1.0;
        if (by >= 0) s.coeff(1, col(by)) -= 1.0;
        s.bound = bound;
        socs.push_back(std::move(s));
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["n"] = n;
        j["objective"] = std::vector<double>(objective.data(), objective.data() + n);
        auto& eq = j["equalities"] = nlohmann::json::array();
        for (Eigen::Index r = 0; r < a_eq.rows(); ++r) {
            nlohmann::json row;
            row["coeffs"] = std::vector<double>(a_eq.row(r).data(), a_eq.row(r).data() + n);
            row["rhs"] = b_eq[r];
            eq.push_back(row);
        }
        auto& iq = j["inequalities"] = nlohmann::json::array();
        for (const auto& row : ineqs) {
            nlohmann::json r;
            for (const auto& [i, a] : row.terms) r["terms"].push_back({{"var", i}, {"coeff", a}});
            r["rhs"] = row.rhs;
            iq.push_back(r);
        }
        auto& sc = j["socs"] = nlohmann::json::array();
        for (const auto& s : socs) {
            nlohmann::json r;
            r["vars"] = s.vars;
            r["bound"] = s.bound;
            sc.push_back(r);
        }
        j["lo"] = std::vector<double>(lo.data(), lo.data() + n);
        j["hi"] = std::vector<double>(hi.data(), hi.data() + n);
        return j;
    }
};

struct SolveResult {
    Eigen::VectorXd x;
    double objective = 0.0;
    SolveStatus status = SolveStatus::MaxIter;
    double kkt_residual = std::numeric_limits<double>::infinity();
    int newton_steps = 0;
};

namespace conic_detail {

// Internal barrier description shared by phase I and the main solve. Boxes
// are folded into sparse rows when a slack variable is present.
struct BarrierProblem {
    int n = 0;
    Eigen::VectorXd objective;  // maximize
    Eigen::MatrixXd a_eq;
    Eigen::VectorXd b_eq;
    std::vector<SparseRow> rows;
    Eigen::VectorXd lo, hi;  // entries may be +/-inf
    // SOC barrier: -log(bound^2 + x[slack] - ||Gx+g||^2), slack < 0 for none
    struct Soc {
        std::vector<int> vars;
        Eigen::MatrixXd coeff;
        Eigen::VectorXd offset;
        double bound = 0.0;
        int slack = -1;
    };
    std::vector<Soc> socs;

    std::size_t barrier_count() const {
        std::size_t m = rows.size() + socs.size();
        for (int i = 0; i < n; ++i) {
            if (std::isfinite(lo[i])) ++m;
            if (std::isfinite(hi[i])) ++m;
        }
        return m;
    }
};

inline double soc_margin(const BarrierProblem::Soc& s, const Eigen::VectorXd& x) {
    Eigen::VectorXd u = s.offset;
    for (std::size_t c = 0; c < s.vars.size(); ++c)
        u += s.coeff.col(static_cast<Eigen::Index>(c)) * x[s.vars[c]];
    double w = s.bound * s.bound - u.squaredNorm();
    if (s.slack >= 0) w += x[s.slack];
    return w;
}

// barrier value; +inf when outside the domain
inline double eval_phi(const BarrierProblem& bp, const Eigen::VectorXd& x, double t) {
    double phi = -t * bp.objective.dot(x);
    for (const auto& row : bp.rows) {
        const double f = row.dot(x) - row.rhs;
        if (f >= 0.0) return std::numeric_limits<double>::infinity();
        phi -= std::log(-f);
    }
    for (int i = 0; i < bp.n; ++i) {
        if (std::isfinite(bp.lo[i])) {
            if (x[i] <= bp.lo[i]) return std::numeric_limits<double>::infinity();
            phi -= std::log(x[i] - bp.lo[i]);
        }
        if (std::isfinite(bp.hi[i])) {
            if (x[i] >= bp.hi[i]) return std::numeric_limits<double>::infinity();
            phi -= std::log(bp.hi[i] - x[i]);
        }
    }
    for (const auto& s : bp.socs) {
        const double w = soc_margin(s, x);
        if (w <= 0.0) return std::numeric_limits<double>::infinity();
        phi -= std::log(w);
    }
    return phi;
}

inline void eval_grad_hess(const BarrierProblem& bp, const Eigen::VectorXd& x, double t,
                           Eigen::VectorXd& grad, Eigen::MatrixXd& hess) {
    grad = -t * bp.objective;
    hess.setZero();
    for (const auto& row : bp.rows) {
        const double f = row.dot(x) - row.rhs;
        const double inv = 1.0 / (-f);
        for (const auto& [i, a] : row.terms) {
            grad[i] += a * inv;
            for (const auto& [j, b] : row.terms) hess(i, j) += a * b * inv * inv;
        }
    }
    for (int i = 0; i < bp.n; ++i) {
        if (std::isfinite(bp.lo[i])) {
            const double inv = 1.0 / (x[i] - bp.lo[i]);
            grad[i] -= inv;
            hess(i, i) += inv * inv;
        }
        if (std::isfinite(bp.hi[i])) {
            const double inv = 1.0 / (bp.hi[i] - x[i]);
            grad[i] += inv;
            hess(i, i) += inv * inv;
        }
    }
    for (const auto& s : bp.socs) {
        Eigen::VectorXd u = s.offset;
        for (std::size_t c = 0; c < s.vars.size(); ++c)
            u += s.coeff.col(static_cast<Eigen::Index>(c)) * x[s.vars[c]];
        double w = s.bound * s.bound - u.squaredNorm();
        if (s.slack >= 0) w += x[s.slack];
        // grad of -log(w): (2 G^T u - e_slack)/w ; hessian has the rank-1 term
        Eigen::VectorXd gtu = 2.0 * s.coeff.transpose() * u;  // over s.vars
        const double inv = 1.0 / w;
        for (std::size_t c = 0; c < s.vars.size(); ++c) grad[s.vars[c]] += gtu[static_cast<Eigen::Index>(c)] * inv;
        if (s.slack >= 0) grad[s.slack] -= inv;
        Eigen::MatrixXd gtg = 2.0 * s.coeff.transpose() * s.coeff;  // d(-u^2) second term
        for (std::size_t a = 0; a < s.vars.size(); ++a)
            for (std::size_t b = 0; b < s.vars.size(); ++b)
                hess(s.vars[a], s.vars[b]) += gtg(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) * inv;
        // outer product of the full margin gradient (includes slack column)
        std::vector<int> all_vars = s.vars;
        Eigen::VectorXd dw(static_cast<Eigen::Index>(s.vars.size()) + (s.slack >= 0 ? 1 : 0));
        for (std::size_t c = 0; c < s.vars.size(); ++c) dw[static_cast<Eigen::Index>(c)] = -gtu[static_cast<Eigen::Index>(c)];
        if (s.slack >= 0) {
            dw[static_cast<Eigen::Index>(s.vars.size())] = 1.0;
            all_vars.push_back(s.slack);
        }
        for (std::size_t a = 0; a < all_vars.size(); ++a)
            for (std::size_t b = 0; b < all_vars.size(); ++b)
                hess(all_vars[a], all_vars[b]) +=
                    dw[static_cast<Eigen::Index>(a)] * dw[static_cast<Eigen::Index>(b)] * inv * inv;
    }
}

struct BarrierOutcome {
    Eigen::VectorXd x;
    bool converged = false;
    int newton_steps = 0;
    double gap = std::numeric_limits<double>::infinity();
};

// Newton barrier method with equality constraints. `x0` must satisfy the
// equalities and lie strictly inside every barrier.
inline BarrierOutcome minimize_barrier(const BarrierProblem& bp, Eigen::VectorXd x0, double tol,
                                       int max_newton,
                                       const std::function<bool(const Eigen::VectorXd&)>& early_stop = {}) {
    BarrierOutcome out;
    out.x = std::move(x0);
    const auto m = static_cast<double>(bp.barrier_count());
    double t = 1.0;
    const double mu = 10.0;
    Eigen::VectorXd grad(bp.n);
    Eigen::MatrixXd hess(bp.n, bp.n);

    while (out.newton_steps < max_newton) {
        // center at the current t
        for (int it = 0; it < 80 && out.newton_steps < max_newton; ++it) {
            eval_grad_hess(bp, out.x, t, grad, hess);
            double ridge = 1e-12 * (1.0 + hess.trace() / std::max(1, bp.n));
            Eigen::VectorXd dx;
            Eigen::VectorXd w;
            for (int attempt = 0; attempt < 6; ++attempt) {
                Eigen::MatrixXd hr = hess;
                hr.diagonal().array() += ridge;
                Eigen::LLT<Eigen::MatrixXd> llt(hr);
                if (llt.info() != Eigen::Success) {
                    ridge *= 100.0;
                    continue;
                }
                if (bp.a_eq.rows() == 0) {
                    dx = llt.solve(-grad);
                } else {
                    const Eigen::MatrixXd hinv_at = llt.solve(bp.a_eq.transpose());
                    const Eigen::VectorXd hinv_g = llt.solve(grad);
                    const Eigen::MatrixXd schur = bp.a_eq * hinv_at;
                    w = schur.ldlt().solve(-bp.a_eq * hinv_g);
                    dx = -hinv_g - hinv_at * w;
                }
                break;
            }
            if (dx.size() == 0 || !dx.allFinite()) return out;  // numerical failure
            const double decrement = -grad.dot(dx);
            if (decrement / 2.0 <= 1e-12) break;

            const double phi0 = eval_phi(bp, out.x, t);
            double step = 1.0;
            bool moved = false;
            for (int ls = 0; ls < 60; ++ls) {
                const Eigen::VectorXd cand = out.x + step * dx;
                const double phi1 = eval_phi(bp, cand, t);
                if (std::isfinite(phi1) && phi1 <= phi0 - 0.25 * step * decrement) {
                    out.x = cand;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            ++out.newton_steps;
            if (!moved) break;
            if (early_stop && early_stop(out.x)) {
                out.converged = true;
                out.gap = m / t;
                return out;
            }
        }
        out.gap = m / t;
        if (out.gap < tol) {
            out.converged = true;
            return out;
        }
        t *= mu;
    }
    return out;
}

}  // namespace conic_detail

// Interior-point solve of the cone program. Runs a phase-I slack
// minimization when no strictly feasible start is supplied.
inline SolveResult solve(const ConeProgram& prog, std::optional<Eigen::VectorXd> start = std::nullopt,
                         double tol = 1e-8) {
    using namespace conic_detail;
    SolveResult result;
    result.x = Eigen::VectorXd::Zero(prog.n);
    if (prog.n == 0) {
        result.status = SolveStatus::Optimal;
        result.kkt_residual = 0.0;
        return result;
    }

    BarrierProblem bp;
    bp.n = prog.n;
    bp.objective = prog.objective;
    bp.a_eq = prog.a_eq;
    bp.b_eq = prog.b_eq;
    bp.rows = prog.ineqs;
    bp.lo = prog.lo;
    bp.hi = prog.hi;
    for (const auto& s : prog.socs) bp.socs.push_back({s.vars, s.coeff, s.offset, s.bound, -1});

    auto project_eq = [&](Eigen::VectorXd x) {
        if (prog.a_eq.rows() == 0) return x;
        const Eigen::VectorXd resid = prog.a_eq * x - prog.b_eq;
        const Eigen::MatrixXd aat = prog.a_eq * prog.a_eq.transpose();
        x -= prog.a_eq.transpose() * aat.ldlt().solve(resid);
        return x;
    };

    auto strictly_feasible = [&](const Eigen::VectorXd& x) {
        const double margin = 1e-10;
        for (const auto& row : bp.rows)
            if (row.dot(x) - row.rhs > -margin) return false;
        for (int i = 0; i < bp.n; ++i) {
            if (std::isfinite(bp.lo[i]) && x[i] - bp.lo[i] < margin) return false;
            if (std::isfinite(bp.hi[i]) && bp.hi[i] - x[i] < margin) return false;
        }
        for (const auto& s : bp.socs)
            if (soc_margin(s, x) < margin) return false;
        if (prog.a_eq.rows() > 0 && (prog.a_eq * x - prog.b_eq).lpNorm<Eigen::Infinity>() > 1e-9)
            return false;
        return true;
    };

    Eigen::VectorXd x0;
    bool have_start = false;
    if (start) {
        x0 = project_eq(*start);
        have_start = strictly_feasible(x0);
    }

    if (!have_start) {
        // phase I: minimize the shared violation slack
        BarrierProblem ph;
        ph.n = prog.n + 1;
        const int s_idx = prog.n;
        ph.objective = Eigen::VectorXd::Zero(ph.n);
        ph.objective[s_idx] = -1.0;  // maximize -s
        ph.a_eq.resize(prog.a_eq.rows(), ph.n);
        if (prog.a_eq.rows() > 0) {
            ph.a_eq.setZero();
            ph.a_eq.leftCols(prog.n) = prog.a_eq;
        }
        ph.b_eq = prog.b_eq;
        ph.lo = Eigen::VectorXd::Constant(ph.n, -std::numeric_limits<double>::infinity());
        ph.hi = Eigen::VectorXd::Constant(ph.n, std::numeric_limits<double>::infinity());
        for (const auto& row : prog.ineqs) {
            SparseRow r = row;
            r.terms.emplace_back(s_idx, -1.0);
            ph.rows.push_back(std::move(r));
        }
        for (int i = 0; i < prog.n; ++i) {
            if (std::isfinite(prog.lo[i]))
                ph.rows.push_back({{{i, -1.0}, {s_idx, -1.0}}, -prog.lo[i]});
            if (std::isfinite(prog.hi[i]))
                ph.rows.push_back({{{i, 1.0}, {s_idx, -1.0}}, prog.hi[i]});
        }
        for (const auto& s : prog.socs) ph.socs.push_back({s.vars, s.coeff, s.offset, s.bound, s_idx});

        Eigen::VectorXd z0 = Eigen::VectorXd::Zero(ph.n);
        if (start) z0.head(prog.n) = *start;
        z0.head(prog.n) = project_eq(z0.head(prog.n));
        double worst = 0.0;
        for (const auto& row : prog.ineqs) worst = std::max(worst, row.dot(z0.head(prog.n)) - row.rhs);
        for (int i = 0; i < prog.n; ++i) {
            if (std::isfinite(prog.lo[i])) worst = std::max(worst, prog.lo[i] - z0[i]);
            if (std::isfinite(prog.hi[i])) worst = std::max(worst, z0[i] - prog.hi[i]);
        }
        for (const auto& s : bp.socs) {
            Eigen::VectorXd u = s.offset;
            for (std::size_t c = 0; c < s.vars.size(); ++c)
                u += s.coeff.col(static_cast<Eigen::Index>(c)) * z0[s.vars[c]];
            worst = std::max(worst, u.squaredNorm() - s.bound * s.bound);
        }
        z0[s_idx] = worst + 1.0;

        auto done = [&](const Eigen::VectorXd& z) {
            return z[z.size() - 1] < -1e-8 && strictly_feasible(z.head(prog.n));
        };
        const BarrierOutcome ph_out = minimize_barrier(ph, z0, 1e-10, 4000, done);
        result.newton_steps += ph_out.newton_steps;
        if (!done(ph_out.x)) {
            result.status = SolveStatus::Infeasible;
            result.x = ph_out.x.head(prog.n);
            result.objective = prog.objective.dot(result.x);
            return result;
        }
        x0 = ph_out.x.head(prog.n);
    }

    const BarrierOutcome main = minimize_barrier(bp, x0, tol, 6000);
    result.newton_steps += main.newton_steps;
    result.x = main.x;
    result.objective = prog.objective.dot(main.x);
    result.kkt_residual = main.gap;
    result.status = main.converged ? SolveStatus::Optimal : SolveStatus::MaxIter;
    if (!main.x.allFinite()) result.status = SolveStatus::MaxIter;
    return result;
}

}  // namespace ckm
