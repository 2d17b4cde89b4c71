#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace ckm {

// Clamped uniform B-spline basis of order k over g grid intervals on [0, 1].
// Knot vector length is g + 2k - 1 (k-fold clamped ends), giving g + k - 1
// basis functions B_{0..g+k-2, k}.
class BsplineBasis {
public:
    BsplineBasis(int grid, int order) : g_(grid), k_(order) {
        if (grid < 1 || order < 1) throw std::invalid_argument("BsplineBasis: grid, order must be >= 1");
        knots_.resize(static_cast<std::size_t>(g_ + 2 * k_ - 1));
        for (int i = 0; i < g_ + 2 * k_ - 1; ++i) {
            if (i < k_)
                knots_[i] = 0.0;
            else if (i >= g_ + k_ - 1)
                knots_[i] = 1.0;
            else
                knots_[i] = static_cast<double>(i - k_ + 1) / static_cast<double>(g_);
        }
    }

    int grid() const { return g_; }
    int order() const { return k_; }
    int num_basis() const { return g_ + k_ - 1; }
    const std::vector<double>& knots() const { return knots_; }

    // index of the knot span containing v (v clamped to [0, 1])
    int find_span(double v) const {
        v = std::clamp(v, 0.0, 1.0);
        // spans run from k-1 to g+k-2
        int lo = k_ - 1, hi = g_ + k_ - 2;
        if (v >= 1.0) return hi;
        int j = lo + static_cast<int>(std::floor(v * g_));
        return std::clamp(j, lo, hi);
    }

    // Active basis values B_{j-k+1..j, k}(v); returns the span j. `values`
    // must hold k doubles.
    int active_basis(double v, double* values) const {
        v = std::clamp(v, 0.0, 1.0);
        const int j = find_span(v);
        triangle(j, v, k_, values);
        return j;
    }

    // Active values and derivatives together; `values` and `derivs` hold k
    // doubles each. Derivatives follow the lowered-order recurrence with
    // zero-denominator terms dropped.
    int active_basis_and_derivative(double v, double* values, double* derivs) const {
        v = std::clamp(v, 0.0, 1.0);
        const int j = find_span(v);
        triangle(j, v, k_, values);
        if (k_ == 1) {
            derivs[0] = 0.0;
            return j;
        }
        // order k-1 basis on the same span: B_{j-k+2..j, k-1}
        std::vector<double> low(static_cast<std::size_t>(k_ - 1));
        triangle(j, v, k_ - 1, low.data());
        auto lower = [&](int m) {  // B_{m, k-1}(v)
            const int r = m - (j - k_ + 2);
            return (r >= 0 && r < k_ - 1) ? low[static_cast<std::size_t>(r)] : 0.0;
        };
        for (int r = 0; r < k_; ++r) {
            const int m = j - k_ + 1 + r;
            double term1 = 0.0, term2 = 0.0;
            const double den1 = knot(m + k_ - 1) - knot(m);
            const double den2 = knot(m + k_) - knot(m + 1);
            if (den1 != 0.0) term1 = lower(m) / den1;
            if (den2 != 0.0) term2 = lower(m + 1) / den2;
            derivs[r] = (k_ - 1) * (term1 - term2);
        }
        return j;
    }

    // Dense basis vector of all g+k-1 functions (convenience for tests).
    std::vector<double> basis(double v) const {
        std::vector<double> out(static_cast<std::size_t>(num_basis()), 0.0);
        std::vector<double> act(static_cast<std::size_t>(k_));
        const int j = active_basis(v, act.data());
        for (int r = 0; r < k_; ++r) {
            const int m = j - k_ + 1 + r;
            if (m >= 0 && m < num_basis()) out[static_cast<std::size_t>(m)] = act[static_cast<std::size_t>(r)];
        }
        return out;
    }

    std::vector<double> basis_derivative(double v) const {
        std::vector<double> out(static_cast<std::size_t>(num_basis()), 0.0);
        std::vector<double> act(static_cast<std::size_t>(k_)), der(static_cast<std::size_t>(k_));
        const int j = active_basis_and_derivative(v, act.data(), der.data());
        for (int r = 0; r < k_; ++r) {
            const int m = j - k_ + 1 + r;
            if (m >= 0 && m < num_basis()) out[static_cast<std::size_t>(m)] = der[static_cast<std::size_t>(r)];
        }
        return out;
    }

private:
    double knot(int i) const {
        if (i < 0) return knots_.front();
        if (i >= static_cast<int>(knots_.size())) return knots_.back();
        return knots_[static_cast<std::size_t>(i)];
    }

    // bottom-up span-local evaluation of the `order` active functions on span j
    void triangle(int j, double v, int order, double* N) const {
        N[0] = 1.0;
        std::vector<double> left(static_cast<std::size_t>(order)), right(static_cast<std::size_t>(order));
        for (int d = 1; d < order; ++d) {
            left[static_cast<std::size_t>(d)] = v - knot(j + 1 - d);
            right[static_cast<std::size_t>(d)] = knot(j + d) - v;
            double saved = 0.0;
            for (int r = 0; r < d; ++r) {
                const double den = right[static_cast<std::size_t>(r + 1)] + left[static_cast<std::size_t>(d - r)];
                const double temp = den != 0.0 ? N[r] / den : 0.0;
                N[r] = saved + right[static_cast<std::size_t>(r + 1)] * temp;
                saved = left[static_cast<std::size_t>(d - r)] * temp;
            }
            N[d] = saved;
        }
    }

    int g_;
    int k_;
    std::vector<double> knots_;
};

}  // namespace ckm
