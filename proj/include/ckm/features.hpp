#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "ckm/rng.hpp"
#include "ckm/scene.hpp"
#include "ckm/tensor.hpp"

namespace ckm {

struct Measurement {
    std::size_t row = 0, col = 0;
    double gain = 0.0;  // linear power gain
};

// Uniform without-replacement sample of ground-truth cells.
struct MeasurementSet {
    std::vector<Measurement> entries;  // sorted by (row, col)
    double ratio = 0.0;
    std::uint64_t seed = 0;
    std::size_t grid_rows = 0, grid_cols = 0;

    // evaluation split: every cell not in the training sample
    std::vector<std::pair<std::size_t, std::size_t>> complement_cells() const {
        std::vector<char> taken(grid_rows * grid_cols, 0);
        for (const auto& e : entries) taken[e.row * grid_cols + e.col] = 1;
        std::vector<std::pair<std::size_t, std::size_t>> out;
        out.reserve(grid_rows * grid_cols - entries.size());
        for (std::size_t r = 0; r < grid_rows; ++r)
            for (std::size_t c = 0; c < grid_cols; ++c)
                if (!taken[r * grid_cols + c]) out.emplace_back(r, c);
        return out;
    }
};

// Optional noise_sigma_db adds multiplicative log-normal measurement noise;
// the ground-truth map itself stays noise-free.
inline MeasurementSet sample_measurements(const GroundTruthCkm& ckm, double ratio, std::uint64_t seed,
                                          double noise_sigma_db = 0.0) {
    if (ratio <= 0.0 || ratio > 1.0) throw std::invalid_argument("ratio must be in (0, 1]");
    const std::size_t rows = ckm.gains.shape[0];
    const std::size_t cols = ckm.gains.shape[1];
    const std::size_t total = rows * cols;
    const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
    if (count == 0) throw std::invalid_argument("sampling ratio yields zero measurements");

    Rng rng(seed);
    std::vector<std::size_t> idx(total);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < count; ++i) {  // partial Fisher-Yates
        const std::size_t j = i + rng.uniform_index(total - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(count);
    std::sort(idx.begin(), idx.end());

    MeasurementSet ms;
    ms.ratio = ratio;
    ms.seed = seed;
    ms.grid_rows = rows;
    ms.grid_cols = cols;
    ms.entries.reserve(count);
    for (std::size_t flat : idx) {
        Measurement m;
        m.row = flat / cols;
        m.col = flat % cols;
        m.gain = ckm.gains[flat];
        if (noise_sigma_db > 0.0) m.gain *= std::pow(10.0, noise_sigma_db * rng.normal() / 10.0);
        ms.entries.push_back(m);
    }
    return ms;
}

// Unweighted k-nearest-neighbor interpolation in the dB domain. Distances are
// Euclidean in cell units; ties resolve toward the sample with the smaller
// (row, col).
inline Tensor knn_interpolate(const MeasurementSet& ms, std::size_t k,
                              std::pair<std::size_t, std::size_t> shape) {
    if (k < 1) throw std::invalid_argument("k must be >= 1");
    if (ms.entries.size() < k) throw std::invalid_argument("fewer samples than k");
    const std::size_t rows = shape.first, cols = shape.second;
    const std::size_t n = ms.entries.size();
    std::vector<double> gains_db(n);
    for (std::size_t i = 0; i < n; ++i) gains_db[i] = 10.0 * std::log10(ms.entries[i].gain);

    Tensor out({rows, cols});
    std::vector<std::pair<double, std::size_t>> dist(n);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            for (std::size_t i = 0; i < n; ++i) {
                const double dr = static_cast<double>(r) - static_cast<double>(ms.entries[i].row);
                const double dc = static_cast<double>(c) - static_cast<double>(ms.entries[i].col);
                dist[i] = {dr * dr + dc * dc, i};
            }
            // entries are (row,col)-sorted, so the index is the tie-breaker
            std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
            double sum = 0.0;
            for (std::size_t i = 0; i < k; ++i) sum += gains_db[dist[i].second];
            out.at(r, c) = sum / static_cast<double>(k);
        }
    }
    return out;
}

// Per-channel (min, max) used for min-max normalization. A degenerate channel
// (min == max) normalizes to zero.
struct ChannelNorm {
    double min = 0.0, max = 1.0;
    double apply(double v) const { return max > min ? (v - min) / (max - min) : 0.0; }
    double invert(double t) const { return t * (max - min) + min; }
};

inline const std::vector<std::string>& feature_channel_names() {
    static const std::vector<std::string> names = {"bs_position_onehot", "building_heights_norm",
                                                   "sampled_gain_norm_with_mask_zeros", "los_map",
                                                   "knn_interp_norm"};
    return names;
}

// The d_in = 5 conditional input tensor; channel order is part of the file
// format contract.
struct FeatureStack {
    Tensor channels;  // [5 x rows x cols]
    std::vector<ChannelNorm> norm;

    std::size_t rows() const { return channels.shape[1]; }
    std::size_t cols() const { return channels.shape[2]; }
    // normalization of the sampled-gain channel, reused for training targets
    const ChannelNorm& gain_norm() const { return norm[2]; }
};

inline FeatureStack build_feature_stack(const EnvironmentScene& scene, const MeasurementSet& ms,
                                        const Tensor& los, const Tensor& knn_db) {
    const std::size_t rows = scene.rows(), cols = scene.cols();
    if (los.shape != std::vector<std::size_t>{rows, cols} ||
        knn_db.shape != std::vector<std::size_t>{rows, cols} || ms.grid_rows != rows ||
        ms.grid_cols != cols)
        throw std::invalid_argument("build_feature_stack: shape mismatch");

    FeatureStack fs;
    fs.channels = Tensor({5, rows, cols});
    fs.norm.assign(5, ChannelNorm{});

    // channel 0: BS one-hot
    fs.channels.at(0, scene.nearest_row(scene.bs_x_m), scene.nearest_col(scene.bs_y_m)) = 1.0;

    // channel 1: building heights, min-max over the grid
    auto [hmin_it, hmax_it] = std::minmax_element(scene.heights.data.begin(), scene.heights.data.end());
    fs.norm[1] = {*hmin_it, *hmax_it};
    for (std::size_t i = 0; i < rows * cols; ++i)
        fs.channels.data[1 * rows * cols + i] = fs.norm[1].apply(scene.heights.data[i]);

    // channel 2: sampled gains in dB, min-max over the observed values, zeros elsewhere
    double gmin = std::numeric_limits<double>::infinity();
    double gmax = -std::numeric_limits<double>::infinity();
    for (const auto& e : ms.entries) {
        const double db = 10.0 * std::log10(e.gain);
        gmin = std::min(gmin, db);
        gmax = std::max(gmax, db);
    }
    fs.norm[2] = {gmin, gmax};
    for (const auto& e : ms.entries)
        fs.channels.at(2, e.row, e.col) = fs.norm[2].apply(10.0 * std::log10(e.gain));

    // channel 3: LoS map, already binary
    fs.norm[3] = {0.0, 1.0};
    std::copy(los.data.begin(), los.data.end(), fs.channels.data.begin() + 3 * rows * cols);

    // channel 4: KNN-interpolated dB map, min-max over its own values
    auto [kmin_it, kmax_it] = std::minmax_element(knn_db.data.begin(), knn_db.data.end());
    fs.norm[4] = {*kmin_it, *kmax_it};
    for (std::size_t i = 0; i < rows * cols; ++i)
        fs.channels.data[4 * rows * cols + i] = fs.norm[4].apply(knn_db.data[i]);

    return fs;
}

struct ExtentBounds {
    double x_min = 0.0, x_max = 1.0;
    double y_min = 0.0, y_max = 1.0;

    static ExtentBounds of(const EnvironmentScene& scene) {
        return {0.0, scene.width_m, 0.0, scene.depth_m};
    }
};

// Affine map of a physical location into the unit square.
inline std::pair<double, double> normalize_location(double x, double y, const ExtentBounds& e) {
    if (x < e.x_min || x > e.x_max || y < e.y_min || y > e.y_max)
        throw std::invalid_argument("location outside extent");
    return {(x - e.x_min) / (e.x_max - e.x_min), (y - e.y_min) / (e.y_max - e.y_min)};
}

}  // namespace ckm
