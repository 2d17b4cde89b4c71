#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "ckm/features.hpp"
#include "ckm/regressor.hpp"
#include "ckm/scene.hpp"

namespace ckm {

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 128;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    std::size_t eval_every = 10;  // epochs between eval-split NMSE probes
};

struct EpochStats {
    std::size_t epoch = 0;
    double train_mse = 0.0;
    double eval_nmse = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
    CkmModel model;
    std::vector<EpochStats> history;
    double final_eval_nmse = 0.0;
};

// NMSE over a cell set, computed in the normalized dB target domain.
inline double evaluate_nmse_grid(const Tensor& pred_norm, const GroundTruthCkm& truth,
                                 const ChannelNorm& norm,
                                 const std::vector<std::pair<std::size_t, std::size_t>>& cells) {
    if (cells.empty()) throw std::invalid_argument("evaluate_nmse: empty domain");
    double num = 0.0, den = 0.0;
    for (const auto& [r, c] : cells) {
        const double t = norm.apply(truth.gains_db.at(r, c));
        const double p = pred_norm.at(r, c);
        num += (p - t) * (p - t);
        den += t * t;
    }
    if (den == 0.0) throw std::invalid_argument("evaluate_nmse: zero signal energy");
    return num / den;
}

inline double evaluate_nmse_model(const CkmModel& model, const GroundTruthCkm& truth,
                                  const ChannelNorm& norm, const EnvironmentScene& scene,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& cells) {
    if (cells.empty()) throw std::invalid_argument("evaluate_nmse: empty domain");
    double num = 0.0, den = 0.0;
    for (const auto& [r, c] : cells) {
        const double qx = scene.cell_center_x(r) / scene.width_m;
        const double qy = scene.cell_center_y(c) / scene.depth_m;
        const double t = norm.apply(truth.gains_db.at(r, c));
        const double p = model.predict(qx, qy);
        num += (p - t) * (p - t);
        den += t * t;
    }
    if (den == 0.0) throw std::invalid_argument("evaluate_nmse: zero signal energy");
    return num / den;
}

// Evaluate the model at every cell center (normalized dB domain).
inline Tensor rasterize_ckm(const CkmModel& model, const EnvironmentScene& scene) {
    Tensor out({scene.rows(), scene.cols()});
    for (std::size_t r = 0; r < scene.rows(); ++r)
        for (std::size_t c = 0; c < scene.cols(); ++c)
            out.at(r, c) = model.predict(scene.cell_center_x(r) / scene.width_m,
                                         scene.cell_center_y(c) / scene.depth_m);
    return out;
}

// KNN baseline: interpolated dB map normalized like the training targets.
inline double knn_baseline_nmse(const MeasurementSet& ms, std::size_t k, const GroundTruthCkm& truth,
                                const ChannelNorm& norm) {
    Tensor knn_db = knn_interpolate(ms, k, {ms.grid_rows, ms.grid_cols});
    Tensor pred(knn_db.shape);
    for (std::size_t i = 0; i < knn_db.numel(); ++i) pred.data[i] = norm.apply(knn_db.data[i]);
    return evaluate_nmse_grid(pred, truth, norm, ms.complement_cells());
}

// Joint end-to-end fit of encoder (when present) and regressor head on the
// sampled measurements. Targets are the min-max normalized dB gains, using
// the same normalization as the sampled-gain feature channel. KAN input
// domains calibrate during the first epoch and then freeze.
inline TrainResult train(RegressorKind kind, const EnvironmentScene& scene, const FeatureStack& stack,
                         const MeasurementSet& ms, const GroundTruthCkm& truth, const TrainConfig& cfg) {
    const std::size_t n_train = ms.entries.size();
    if (cfg.batch_size > n_train)
        throw std::invalid_argument("batch_size exceeds training-set size");

    TrainResult result{CkmModel(kind, cfg.seed), {}, 0.0};
    CkmModel& model = result.model;
    model.set_extent(ExtentBounds::of(scene));
    model.set_gain_norm(stack.gain_norm());
    const ChannelNorm norm = stack.gain_norm();

    struct Sample {
        double qx, qy, target;
    };
    std::vector<Sample> samples;
    samples.reserve(n_train);
    for (const auto& e : ms.entries)
        samples.push_back({scene.cell_center_x(e.row) / scene.width_m,
                           scene.cell_center_y(e.col) / scene.depth_m,
                           norm.apply(10.0 * std::log10(e.gain))});

    const auto eval_cells = ms.complement_cells();
    const bool conditional = kind_is_conditional(kind);
    Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), 0);

    Tensor d_cout;
    double first_epoch_mse = -1.0;
    model.head().set_calibrating(true);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = n_train; i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

        double epoch_sq = 0.0;
        for (std::size_t begin = 0; begin < n_train; begin += cfg.batch_size) {
            const std::size_t end = std::min(begin + cfg.batch_size, n_train);
            const auto batch_n = static_cast<double>(end - begin);
            if (conditional) {
                model.encode_scene(stack);
                d_cout = Tensor(model.cached_features().shape);
            }
            model.store().zero_grad();
            for (std::size_t s = begin; s < end; ++s) {
                const Sample& smp = samples[order[s]];
                CkmModel::Query q = model.train_forward(smp.qx, smp.qy);
                const double err = q.value - smp.target;
                epoch_sq += err * err;
                model.train_backward(q, 2.0 * err / batch_n, conditional ? &d_cout : nullptr);
            }
            if (conditional) model.encoder()->backward(model.store(), d_cout);
            model.store().adam_step(cfg.learning_rate);
        }
        const double mse = epoch_sq / static_cast<double>(n_train);
        if (epoch == 0) {
            first_epoch_mse = mse;
            model.head().freeze_domains(model.store());
        }
        if (!std::isfinite(mse) || (first_epoch_mse > 0.0 && mse > 10.0 * first_epoch_mse))
            throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                               " (mse=" + std::to_string(mse) + ")");

        EpochStats stats{epoch, mse, std::numeric_limits<double>::quiet_NaN()};
        const bool probe = cfg.eval_every > 0 &&
                           (epoch % cfg.eval_every == cfg.eval_every - 1 || epoch + 1 == cfg.epochs);
        if (probe) {
            if (conditional) model.encode_scene(stack);
            stats.eval_nmse = evaluate_nmse_model(model, truth, norm, scene, eval_cells);
        }
        result.history.push_back(stats);
    }

    if (conditional) model.encode_scene(stack);
    result.final_eval_nmse = evaluate_nmse_model(model, truth, norm, scene, eval_cells);
    return result;
}

inline void write_loss_csv(const std::string& path, const std::vector<EpochStats>& history) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open loss csv for writing: " + path);
    os << "epoch,train_mse,eval_nmse\n";
    for (const auto& h : history) {
        os << h.epoch << "," << h.train_mse << ",";
        if (std::isfinite(h.eval_nmse)) os << h.eval_nmse;
        os << "\n";
    }
}

}  // namespace ckm
