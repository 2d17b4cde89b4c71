#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ckm/rng.hpp"
#include "ckm/tensor.hpp"

namespace ckm {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class PadMode { Zero, Circular };

// He-uniform kernel init, zero biases.
inline void he_uniform_init(Tensor& t, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.data) v = rng.uniform(-bound, bound);
}

// 2-D convolution (stride 1) over [C,H,W] tensors, computed as an im2col
// GEMM. The layer caches its input; backward rebuilds the column matrix.
class Conv2d {
public:
    Conv2d(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
           std::size_t ksize, std::size_t pad, Rng& rng, PadMode mode = PadMode::Zero)
        : c_in_(c_in), c_out_(c_out), k_(ksize), pad_(pad), mode_(mode) {
        Tensor kernel({c_out, c_in, ksize, ksize});
        he_uniform_init(kernel, c_in * ksize * ksize, rng);
        w_idx_ = store.add(name + ".w", std::move(kernel));
        b_idx_ = store.add(name + ".b", Tensor({c_out}));
    }

    std::size_t out_size(std::size_t in) const { return in + 2 * pad_ - k_ + 1; }

    Tensor forward(ParamStore& store, const Tensor& input) {
        input_ = input;
        const std::size_t h = input.shape[1], w = input.shape[2];
        const std::size_t ho = out_size(h), wo = out_size(w);
        Eigen::MatrixXd col = im2col(input);
        Tensor out({c_out_, ho, wo});
        Eigen::Map<RowMatrix> out_m(out.data.data(), static_cast<Eigen::Index>(c_out_),
                                    static_cast<Eigen::Index>(ho * wo));
        const Tensor& kernel = store.entry(w_idx_).value;
        const Tensor& bias = store.entry(b_idx_).value;
        Eigen::Map<const RowMatrix> k_m(kernel.data.data(), static_cast<Eigen::Index>(c_out_),
                                        static_cast<Eigen::Index>(c_in_ * k_ * k_));
        out_m.noalias() = k_m * col;
        for (std::size_t o = 0; o < c_out_; ++o)
            out_m.row(static_cast<Eigen::Index>(o)).array() += bias[o];
        return out;
    }

    Tensor backward(ParamStore& store, const Tensor& upstream) {
        const std::size_t h = input_.shape[1], w = input_.shape[2];
        const std::size_t ho = upstream.shape[1], wo = upstream.shape[2];
        Eigen::MatrixXd col = im2col(input_);
        Eigen::Map<const RowMatrix> up_m(upstream.data.data(), static_cast<Eigen::Index>(c_out_),
                                         static_cast<Eigen::Index>(ho * wo));
        auto& went = store.entry(w_idx_);
        auto& bent = store.entry(b_idx_);
        Eigen::Map<RowMatrix> dk_m(went.grad.data.data(), static_cast<Eigen::Index>(c_out_),
                                   static_cast<Eigen::Index>(c_in_ * k_ * k_));
        dk_m.noalias() += up_m * col.transpose();
        for (std::size_t o = 0; o < c_out_; ++o)
            bent.grad[o] += up_m.row(static_cast<Eigen::Index>(o)).sum();

        const Tensor& kernel = went.value;
        Eigen::Map<const RowMatrix> k_m(kernel.data.data(), static_cast<Eigen::Index>(c_out_),
                                        static_cast<Eigen::Index>(c_in_ * k_ * k_));
        Eigen::MatrixXd dcol = k_m.transpose() * up_m;
        return col2im(dcol, h, w);
    }

    std::size_t weight_index() const { return w_idx_; }
    std::size_t bias_index() const { return b_idx_; }

private:
    Eigen::MatrixXd im2col(const Tensor& input) const {
        const std::size_t h = input.shape[1], w = input.shape[2];
        const std::size_t ho = out_size(h), wo = out_size(w);
        Eigen::MatrixXd col(static_cast<Eigen::Index>(c_in_ * k_ * k_),
                            static_cast<Eigen::Index>(ho * wo));
        col.setZero();
        const long hh = static_cast<long>(h), ww = static_cast<long>(w);
        for (std::size_t ci = 0; ci < c_in_; ++ci) {
            const double* plane = input.data.data() + ci * h * w;
            for (std::size_t di = 0; di < k_; ++di) {
                for (std::size_t dj = 0; dj < k_; ++dj) {
                    const auto row = static_cast<Eigen::Index>((ci * k_ + di) * k_ + dj);
                    for (std::size_t i = 0; i < ho; ++i) {
                        long si = static_cast<long>(i + di) - static_cast<long>(pad_);
                        if (mode_ == PadMode::Circular) si = ((si % hh) + hh) % hh;
                        if (si < 0 || si >= hh) continue;
                        for (std::size_t j = 0; j < wo; ++j) {
                            long sj = static_cast<long>(j + dj) - static_cast<long>(pad_);
                            if (mode_ == PadMode::Circular) sj = ((sj % ww) + ww) % ww;
                            if (sj < 0 || sj >= ww) continue;
                            col(row, static_cast<Eigen::Index>(i * wo + j)) =
                                plane[static_cast<std::size_t>(si) * w + static_cast<std::size_t>(sj)];
                        }
                    }
                }
            }
        }
        return col;
    }

    Tensor col2im(const Eigen::MatrixXd& dcol, std::size_t h, std::size_t w) const {
        Tensor din({c_in_, h, w});
        const std::size_t ho = out_size(h), wo = out_size(w);
        const long hh = static_cast<long>(h), ww = static_cast<long>(w);
        for (std::size_t ci = 0; ci < c_in_; ++ci) {
            double* plane = din.data.data() + ci * h * w;
            for (std::size_t di = 0; di < k_; ++di) {
                for (std::size_t dj = 0; dj < k_; ++dj) {
                    const auto row = static_cast<Eigen::Index>((ci * k_ + di) * k_ + dj);
                    for (std::size_t i = 0; i < ho; ++i) {
                        long si = static_cast<long>(i + di) - static_cast<long>(pad_);
                        if (mode_ == PadMode::Circular) si = ((si % hh) + hh) % hh;
                        if (si < 0 || si >= hh) continue;
                        for (std::size_t j = 0; j < wo; ++j) {
                            long sj = static_cast<long>(j + dj) - static_cast<long>(pad_);
                            if (mode_ == PadMode::Circular) sj = ((sj % ww) + ww) % ww;
                            if (sj < 0 || sj >= ww) continue;
                            plane[static_cast<std::size_t>(si) * w + static_cast<std::size_t>(sj)] +=
                                dcol(row, static_cast<Eigen::Index>(i * wo + j));
                        }
                    }
                }
            }
        }
        return din;
    }

    std::size_t c_in_, c_out_, k_, pad_;
    PadMode mode_;
    std::size_t w_idx_ = 0, b_idx_ = 0;
    Tensor input_;
};

class Relu {
public:
    Tensor forward(const Tensor& input) {
        mask_.assign(input.numel(), 0);
        Tensor out = input;
        for (std::size_t i = 0; i < out.numel(); ++i) {
            if (out[i] > 0.0)
                mask_[i] = 1;
            else
                out[i] = 0.0;
        }
        return out;
    }
    Tensor backward(const Tensor& upstream) const {
        Tensor din = upstream;
        for (std::size_t i = 0; i < din.numel(); ++i)
            if (!mask_[i]) din[i] = 0.0;
        return din;
    }

private:
    std::vector<char> mask_;
};

// 2x2 max pooling, stride 2. Gradient routes to the argmax cell; ties go to
// the first cell in row-major order.
class MaxPool2 {
public:
    Tensor forward(const Tensor& input) {
        const std::size_t c = input.shape[0], h = input.shape[1], w = input.shape[2];
        if (h % 2 != 0 || w % 2 != 0) throw std::invalid_argument("MaxPool2: odd spatial size");
        in_shape_ = input.shape;
        Tensor out({c, h / 2, w / 2});
        argmax_.assign(out.numel(), 0);
        for (std::size_t ci = 0; ci < c; ++ci) {
            for (std::size_t i = 0; i < h / 2; ++i) {
                for (std::size_t j = 0; j < w / 2; ++j) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t best_idx = 0;
                    for (std::size_t di = 0; di < 2; ++di) {
                        for (std::size_t dj = 0; dj < 2; ++dj) {
                            const std::size_t src = (ci * h + 2 * i + di) * w + 2 * j + dj;
                            if (input.data[src] > best) {
                                best = input.data[src];
                                best_idx = src;
                            }
                        }
                    }
                    out.at(ci, i, j) = best;
                    argmax_[(ci * (h / 2) + i) * (w / 2) + j] = best_idx;
                }
            }
        }
        return out;
    }

    Tensor backward(const Tensor& upstream) const {
        Tensor din(in_shape_);
        for (std::size_t i = 0; i < upstream.numel(); ++i) din.data[argmax_[i]] += upstream.data[i];
        return din;
    }

private:
    std::vector<std::size_t> in_shape_;
    std::vector<std::size_t> argmax_;
};

// Symmetric border crop (used after a 3x3 convolution with padding 2 to
// restore the pre-convolution spatial size).
class Crop {
public:
    explicit Crop(std::size_t border) : border_(border) {}

    Tensor forward(const Tensor& input) {
        in_shape_ = input.shape;
        const std::size_t c = input.shape[0], h = input.shape[1], w = input.shape[2];
        Tensor out({c, h - 2 * border_, w - 2 * border_});
        for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t i = 0; i < out.shape[1]; ++i)
                for (std::size_t j = 0; j < out.shape[2]; ++j)
                    out.at(ci, i, j) = input.at(ci, i + border_, j + border_);
        return out;
    }

    Tensor backward(const Tensor& upstream) const {
        Tensor din(in_shape_);
        for (std::size_t ci = 0; ci < upstream.shape[0]; ++ci)
            for (std::size_t i = 0; i < upstream.shape[1]; ++i)
                for (std::size_t j = 0; j < upstream.shape[2]; ++j)
                    din.at(ci, i + border_, j + border_) = upstream.at(ci, i, j);
        return din;
    }

private:
    std::size_t border_;
    std::vector<std::size_t> in_shape_;
};

// Fully connected layer on flat vectors. The caller keeps the forward
// context, so const queries from several threads stay safe.
class Linear {
public:
    struct Ctx {
        std::vector<double> input;
    };

    Linear(ParamStore& store, const std::string& name, std::size_t n_in, std::size_t n_out, Rng& rng)
        : n_in_(n_in), n_out_(n_out) {
        Tensor weight({n_out, n_in});
        he_uniform_init(weight, n_in, rng);
        w_idx_ = store.add(name + ".w", std::move(weight));
        b_idx_ = store.add(name + ".b", Tensor({n_out}));
    }

    std::vector<double> forward(const ParamStore& store, const std::vector<double>& x, Ctx& ctx) const {
        ctx.input = x;
        const Tensor& weight = store.entry(w_idx_).value;
        const Tensor& bias = store.entry(b_idx_).value;
        std::vector<double> y(n_out_);
        for (std::size_t o = 0; o < n_out_; ++o) {
            double acc = bias[o];
            const double* wrow = weight.data.data() + o * n_in_;
            for (std::size_t i = 0; i < n_in_; ++i) acc += wrow[i] * x[i];
            y[o] = acc;
        }
        return y;
    }

    // Returns d_input; accumulates parameter gradients unless `params` is false.
    std::vector<double> backward(ParamStore& store, const std::vector<double>& upstream,
                                 const Ctx& ctx, bool params = true) const {
        auto& went = store.entry(w_idx_);
        auto& bent = store.entry(b_idx_);
        std::vector<double> dx(n_in_, 0.0);
        const Tensor& weight = went.value;
        for (std::size_t o = 0; o < n_out_; ++o) {
            const double up = upstream[o];
            const double* wrow = weight.data.data() + o * n_in_;
            double* gwrow = went.grad.data.data() + o * n_in_;
            for (std::size_t i = 0; i < n_in_; ++i) {
                if (params) gwrow[i] += up * ctx.input[i];
                dx[i] += wrow[i] * up;
            }
            if (params) bent.grad[o] += up;
        }
        return dx;
    }

    std::size_t in_features() const { return n_in_; }
    std::size_t out_features() const { return n_out_; }

private:
    std::size_t n_in_, n_out_;
    std::size_t w_idx_ = 0, b_idx_ = 0;
};

}  // namespace ckm
