#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "ckm/errors.hpp"

namespace ckm {

// Dense row-major tensor of doubles. Shapes are small and known at call
// sites; this is deliberately minimal.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), 0.0);
    }
    Tensor(std::vector<std::size_t> s, double fill) : shape(std::move(s)) {
        data.assign(numel_of(shape), fill);
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
    }

    std::size_t numel() const { return data.size(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // 2-D / 3-D / 4-D indexed access (row-major)
    double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
    double& at(std::size_t c, std::size_t i, std::size_t j) {
        return data[(c * shape[1] + i) * shape[2] + j];
    }
    double at(std::size_t c, std::size_t i, std::size_t j) const {
        return data[(c * shape[1] + i) * shape[2] + j];
    }
    double& at(std::size_t o, std::size_t c, std::size_t i, std::size_t j) {
        return data[((o * shape[1] + c) * shape[2] + i) * shape[3] + j];
    }
    double at(std::size_t o, std::size_t c, std::size_t i, std::size_t j) const {
        return data[((o * shape[1] + c) * shape[2] + i) * shape[3] + j];
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Named parameter set with per-parameter Adam moments. Iteration order is
// insertion order so updates are deterministic.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor grad;
        Tensor m;  // first moment
        Tensor v;  // second moment
        bool trainable = true;
    };

    // Returns the stable index of the new entry.
    std::size_t add(const std::string& name, Tensor init, bool trainable = true) {
        entries_.push_back(Entry{name, std::move(init), {}, {}, {}, trainable});
        Entry& e = entries_.back();
        e.grad = Tensor(e.value.shape);
        e.m = Tensor(e.value.shape);
        e.v = Tensor(e.value.shape);
        return entries_.size() - 1;
    }

    std::size_t add_buffer(const std::string& name, Tensor init) {
        return add(name, std::move(init), false);
    }

    Entry& entry(std::size_t idx) { return entries_[idx]; }
    const Entry& entry(std::size_t idx) const { return entries_[idx]; }

    Entry& find(const std::string& name) {
        for (auto& e : entries_)
            if (e.name == name) return e;
        throw std::out_of_range("no parameter named " + name);
    }
    const Entry& find(const std::string& name) const {
        return const_cast<ParamStore*>(this)->find(name);
    }
    bool contains(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return true;
        return false;
    }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (e.trainable) n += e.value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_) e.grad.fill(0.0);
    }

    std::size_t step_count() const { return step_; }

    // Bias-corrected Adam update from the accumulated gradients.
    void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
        ++step_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
        for (auto& e : entries_) {
            if (!e.trainable) continue;
            if (!e.grad.same_shape(e.value))
                throw std::invalid_argument("adam_step: gradient shape mismatch for " + e.name);
            for (std::size_t i = 0; i < e.value.numel(); ++i) {
                const double g = e.grad[i];
                e.m[i] = beta1 * e.m[i] + (1.0 - beta1) * g;
                e.v[i] = beta2 * e.v[i] + (1.0 - beta2) * g * g;
                const double mhat = e.m[i] / bc1;
                const double vhat = e.v[i] / bc2;
                e.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

private:
    std::vector<Entry> entries_;
    std::size_t step_ = 0;
};

// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double grad_check(const std::function<double(const Tensor&)>& f, const Tensor& x,
                         const Tensor& analytic_grad, double eps = 1e-5) {
    if (!analytic_grad.same_shape(x))
        throw std::invalid_argument("grad_check: gradient shape mismatch");
    Tensor probe = x;
    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double keep = probe[i];
        probe[i] = keep + eps;
        const double fp = f(probe);
        probe[i] = keep - eps;
        const double fm = f(probe);
        probe[i] = keep;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("grad_check: non-finite function value");
        const double fd = (fp - fm) / (2.0 * eps);
        const double err = std::abs(analytic_grad[i] - fd) / std::max(1.0, std::abs(fd));
        worst = std::max(worst, err);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Checkpoint file: [u64 manifest length][manifest JSON][tensor payloads]
// Payloads are little-endian float64 in manifest order.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void put_f64_le(std::ostream& os, double d) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(d));
    std::memcpy(&bits, &d, 8);
    put_u64_le(os, bits);
}

inline double get_f64_le(std::istream& is) {
    const std::uint64_t bits = get_u64_le(is);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

}  // namespace detail

// `attrs` carries arbitrary model metadata (configs, normalization constants).
inline void save_checkpoint(const std::string& path, const ParamStore& store,
                            const nlohmann::json& attrs = {}) {
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["dtype"] = "f8";
    manifest["attrs"] = attrs;
    auto& list = manifest["tensors"] = nlohmann::json::array();
    for (const auto& e : store.entries())
        list.push_back({{"name", e.name}, {"shape", e.value.shape}});
    const std::string text = manifest.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    detail::put_u64_le(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : store.entries())
        for (double v : e.value.data) detail::put_f64_le(os, v);
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

inline nlohmann::json load_checkpoint(const std::string& path, ParamStore& store) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    const std::uint64_t len = detail::get_u64_le(is);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    const nlohmann::json manifest = nlohmann::json::parse(text);
    if (manifest.at("format_version").get<int>() != 1)
        throw std::runtime_error("unsupported checkpoint format version");
    for (const auto& item : manifest.at("tensors")) {
        const std::string name = item.at("name").get<std::string>();
        const auto shape = item.at("shape").get<std::vector<std::size_t>>();
        Tensor t(shape);
        for (auto& v : t.data) v = detail::get_f64_le(is);
        if (!is) throw std::runtime_error("truncated checkpoint: " + path);
        if (store.contains(name))
            store.find(name).value = std::move(t);
        else
            store.add(name, std::move(t));
    }
    return manifest.at("attrs");
}

}  // namespace ckm
