#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "ckm/bspline.hpp"
#include "ckm/encoder.hpp"
#include "ckm/features.hpp"
#include "ckm/layers.hpp"
#include "ckm/tensor.hpp"

namespace ckm {

// ---------------------------------------------------------------------------
// Bilinear feature sampling
// ---------------------------------------------------------------------------

// Four-corner bilinear read of a [d,H,W] map at a unit-square location. The
// query is rescaled to q' = 2q - 1 and mapped onto the node lattice, so the
// derivative carries the factor 2 from that rescale times the lattice pitch.
// Out-of-map samples clamp to the border (zero derivative there); lattice
// boundaries take the right-limit cell.
struct BilinearSample {
    std::vector<double> value;  // per channel
    std::vector<double> d_x;    // d value / d q̄_x per channel
    std::vector<double> d_y;
    std::size_t i = 0, j = 0;  // base corner
    double mu = 0.0, nu = 0.0;
    double scale_x = 0.0, scale_y = 0.0;  // d lattice coord / d q̄ (0 when clamped)
};

inline BilinearSample bilinear_sample(const Tensor& map, double qx, double qy) {
    const std::size_t d = map.shape[0], h = map.shape[1], w = map.shape[2];
    BilinearSample s;
    s.value.resize(d);
    s.d_x.resize(d);
    s.d_y.resize(d);

    auto locate = [](double q, std::size_t n, std::size_t& i0, double& frac, double& scale) {
        const double qp = 2.0 * q - 1.0;              // normalized to [-1, 1]
        double u = (qp + 1.0) / 2.0 * static_cast<double>(n - 1);  // lattice coordinate
        scale = 2.0 * static_cast<double>(n - 1) / 2.0;
        if (u <= 0.0) {
            u = 0.0;
            if (q < 0.0) scale = 0.0;
        } else if (u >= static_cast<double>(n - 1)) {
            u = static_cast<double>(n - 1);
            if (q > 1.0) scale = 0.0;
        }
        if (n == 1) {
            i0 = 0;
            frac = 0.0;
            scale = 0.0;
            return;
        }
        i0 = std::min(static_cast<std::size_t>(u), n - 2);
        frac = u - static_cast<double>(i0);
    };
    locate(qx, h, s.i, s.mu, s.scale_x);
    locate(qy, w, s.j, s.nu, s.scale_y);

    for (std::size_t c = 0; c < d; ++c) {
        const double c00 = map.at(c, s.i, s.j);
        const double c10 = s.i + 1 < h ? map.at(c, s.i + 1, s.j) : c00;
        const double c01 = s.j + 1 < w ? map.at(c, s.i, s.j + 1) : c00;
        const double c11 = (s.i + 1 < h && s.j + 1 < w) ? map.at(c, s.i + 1, s.j + 1) : c00;
        s.value[c] = (1.0 - s.mu) * (1.0 - s.nu) * c00 + s.mu * (1.0 - s.nu) * c10 +
                     (1.0 - s.mu) * s.nu * c01 + s.mu * s.nu * c11;
        s.d_x[c] = s.scale_x * ((1.0 - s.nu) * (c10 - c00) + s.nu * (c11 - c01));
        s.d_y[c] = s.scale_y * ((1.0 - s.mu) * (c01 - c00) + s.mu * (c11 - c10));
    }
    return s;
}

// Scatter an upstream gradient over the four sampled corners (training path
// into the cached encoder output).
inline void bilinear_scatter(Tensor& d_map, const BilinearSample& s, const std::vector<double>& up) {
    const std::size_t h = d_map.shape[1], w = d_map.shape[2];
    for (std::size_t c = 0; c < up.size(); ++c) {
        d_map.at(c, s.i, s.j) += (1.0 - s.mu) * (1.0 - s.nu) * up[c];
        if (s.i + 1 < h) d_map.at(c, s.i + 1, s.j) += s.mu * (1.0 - s.nu) * up[c];
        if (s.j + 1 < w) d_map.at(c, s.i, s.j + 1) += (1.0 - s.mu) * s.nu * up[c];
        if (s.i + 1 < h && s.j + 1 < w) d_map.at(c, s.i + 1, s.j + 1) += s.mu * s.nu * up[c];
    }
}

// ---------------------------------------------------------------------------
// KAN layer
// ---------------------------------------------------------------------------

// One Kolmogorov-Arnold layer: every edge carries a univariate clamped
// B-spline, outputs are plain sums over incoming edges (no residual base
// activation). Each input is mapped into the knot domain by a per-unit affine
// rescale; the rescale is frozen from running min/max after a calibration
// pass.
class KanLayer {
public:
    struct Ctx {
        std::vector<int> offset;       // first active coefficient per input
        std::vector<double> basis;     // n_in x k active basis values
        std::vector<double> dbasis;    // n_in x k active basis derivatives
        std::vector<double> dv_scale;  // d(knot coord)/d(input), 0 when clamped
    };

    KanLayer(ParamStore& store, const std::string& name, std::size_t n_in, std::size_t n_out,
             int grid, int order, Rng& rng)
        : n_in_(n_in), n_out_(n_out), basis_(grid, order) {
        const auto nb = static_cast<std::size_t>(basis_.num_basis());
        Tensor coeff({n_in, n_out, nb});
        const double bound = 0.1 / std::sqrt(static_cast<double>(n_in));
        for (auto& v : coeff.data) v = rng.uniform(-bound, bound);
        c_idx_ = store.add(name + ".coeff", std::move(coeff));
        lo_idx_ = store.add_buffer(name + ".domain_lo", Tensor({n_in}, -1.0));
        hi_idx_ = store.add_buffer(name + ".domain_hi", Tensor({n_in}, 2.0));
        running_lo_.assign(n_in, std::numeric_limits<double>::infinity());
        running_hi_.assign(n_in, -std::numeric_limits<double>::infinity());
    }

    std::size_t inputs() const { return n_in_; }
    std::size_t outputs() const { return n_out_; }
    const BsplineBasis& basis() const { return basis_; }

    void set_calibrating(bool on) { calibrating_ = on; }

    // Freeze input domains from the observed running ranges, with a small
    // margin so later queries rarely clamp.
    void freeze_domains(ParamStore& store) {
        Tensor& lo = store.entry(lo_idx_).value;
        Tensor& hi = store.entry(hi_idx_).value;
        for (std::size_t i = 0; i < n_in_; ++i) {
            if (!std::isfinite(running_lo_[i]) || !std::isfinite(running_hi_[i])) continue;
            double span = running_hi_[i] - running_lo_[i];
            if (span < 1e-12) span = 1.0;
            lo[i] = running_lo_[i] - 0.05 * span;
            hi[i] = running_hi_[i] + 0.05 * span;
        }
        calibrating_ = false;
    }

    std::vector<double> forward(const ParamStore& store, const std::vector<double>& x, Ctx& ctx) const {
        const auto k = static_cast<std::size_t>(basis_.order());
        ctx.offset.resize(n_in_);
        ctx.basis.resize(n_in_ * k);
        ctx.dbasis.resize(n_in_ * k);
        ctx.dv_scale.resize(n_in_);
        const Tensor& lo = store.entry(lo_idx_).value;
        const Tensor& hi = store.entry(hi_idx_).value;
        const Tensor& coeff = store.entry(c_idx_).value;
        const auto nb = static_cast<std::size_t>(basis_.num_basis());

        if (calibrating_) {
            for (std::size_t i = 0; i < n_in_; ++i) {
                running_lo_[i] = std::min(running_lo_[i], x[i]);
                running_hi_[i] = std::max(running_hi_[i], x[i]);
            }
        }

        std::vector<double> y(n_out_, 0.0);
        for (std::size_t i = 0; i < n_in_; ++i) {
            const double span = hi[i] - lo[i];
            const double inv = span > 0.0 ? 1.0 / span : 0.0;
            double v = (x[i] - lo[i]) * inv;
            double scale = inv;
            if (v < 0.0) {
                v = 0.0;
                scale = 0.0;
            } else if (v > 1.0) {
                v = 1.0;
                scale = 0.0;
            }
            const int j = basis_.active_basis_and_derivative(v, &ctx.basis[i * k], &ctx.dbasis[i * k]);
            ctx.offset[i] = j - basis_.order() + 1;
            ctx.dv_scale[i] = scale;
            const std::size_t base = ctx.offset[i] >= 0 ? static_cast<std::size_t>(ctx.offset[i]) : 0;
            for (std::size_t o = 0; o < n_out_; ++o) {
                const double* crow = coeff.data.data() + (i * n_out_ + o) * nb + base;
                double acc = 0.0;
                for (std::size_t r = 0; r < k; ++r) acc += crow[r] * ctx.basis[i * k + r];
                y[o] += acc;
            }
        }
        return y;
    }

    std::vector<double> backward(ParamStore& store, const std::vector<double>& upstream,
                                 const Ctx& ctx, bool params = true) const {
        const auto k = static_cast<std::size_t>(basis_.order());
        const auto nb = static_cast<std::size_t>(basis_.num_basis());
        auto& cent = store.entry(c_idx_);
        const Tensor& coeff = cent.value;
        std::vector<double> dx(n_in_, 0.0);
        for (std::size_t i = 0; i < n_in_; ++i) {
            const std::size_t base = ctx.offset[i] >= 0 ? static_cast<std::size_t>(ctx.offset[i]) : 0;
            double acc_dx = 0.0;
            for (std::size_t o = 0; o < n_out_; ++o) {
                const double up = upstream[o];
                const double* crow = coeff.data.data() + (i * n_out_ + o) * nb + base;
                double dpsi = 0.0;
                for (std::size_t r = 0; r < k; ++r) dpsi += crow[r] * ctx.dbasis[i * k + r];
                acc_dx += up * dpsi;
                if (params) {
                    double* grow = cent.grad.data.data() + (i * n_out_ + o) * nb + base;
                    for (std::size_t r = 0; r < k; ++r) grow[r] += up * ctx.basis[i * k + r];
                }
            }
            dx[i] = acc_dx * ctx.dv_scale[i];
        }
        return dx;
    }

private:
    std::size_t n_in_, n_out_;
    BsplineBasis basis_;
    std::size_t c_idx_ = 0, lo_idx_ = 0, hi_idx_ = 0;
    bool calibrating_ = false;
    mutable std::vector<double> running_lo_, running_hi_;
};

// ---------------------------------------------------------------------------
// Regressor heads
// ---------------------------------------------------------------------------

struct HeadCtx {
    std::vector<Linear::Ctx> lin;
    std::vector<std::vector<char>> relu_mask;
    std::vector<KanLayer::Ctx> kan;
};

class RegressorHead {
public:
    virtual ~RegressorHead() = default;
    virtual std::size_t input_width() const = 0;
    virtual double forward(const ParamStore& store, const std::vector<double>& x, HeadCtx& ctx) const = 0;
    // d(output)/d(input), optionally accumulating parameter gradients
    virtual std::vector<double> backward(ParamStore& store, double upstream, const HeadCtx& ctx,
                                         bool params) const = 0;
    virtual void set_calibrating(bool on) {}
    virtual void freeze_domains(ParamStore& store) {}
};

// Feedforward stack with rectifier between layers; the final layer is linear.
class MlpHead : public RegressorHead {
public:
    MlpHead(ParamStore& store, const std::string& name, const std::vector<std::size_t>& widths,
            Rng& rng) {
        for (std::size_t l = 0; l + 1 < widths.size(); ++l)
            layers_.emplace_back(store, name + ".fc" + std::to_string(l + 1), widths[l], widths[l + 1],
                                 rng);
    }

    std::size_t input_width() const override { return layers_.front().in_features(); }

    double forward(const ParamStore& store, const std::vector<double>& x, HeadCtx& ctx) const override {
        ctx.lin.resize(layers_.size());
        ctx.relu_mask.assign(layers_.size(), {});
        std::vector<double> v = x;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            v = layers_[l].forward(store, v, ctx.lin[l]);
            if (l + 1 < layers_.size()) {
                ctx.relu_mask[l].assign(v.size(), 0);
                for (std::size_t i = 0; i < v.size(); ++i) {
                    if (v[i] > 0.0)
                        ctx.relu_mask[l][i] = 1;
                    else
                        v[i] = 0.0;
                }
            }
        }
        return v[0];
    }

    std::vector<double> backward(ParamStore& store, double upstream, const HeadCtx& ctx,
                                 bool params) const override {
        std::vector<double> up{upstream};
        for (std::size_t l = layers_.size(); l-- > 0;) {
            up = layers_[l].backward(store, up, ctx.lin[l], params);
            if (l > 0)
                for (std::size_t i = 0; i < up.size(); ++i)
                    if (!ctx.relu_mask[l - 1][i]) up[i] = 0.0;
        }
        return up;
    }

private:
    std::vector<Linear> layers_;
};

class KanHead : public RegressorHead {
public:
    KanHead(ParamStore& store, const std::string& name, const std::vector<std::size_t>& widths,
            int grid, int order, Rng& rng) {
        for (std::size_t l = 0; l + 1 < widths.size(); ++l)
            layers_.emplace_back(store, name + ".kan" + std::to_string(l + 1), widths[l], widths[l + 1],
                                 grid, order, rng);
    }

    std::size_t input_width() const override { return layers_.front().inputs(); }

    double forward(const ParamStore& store, const std::vector<double>& x, HeadCtx& ctx) const override {
        ctx.kan.resize(layers_.size());
        std::vector<double> v = x;
        for (std::size_t l = 0; l < layers_.size(); ++l) v = layers_[l].forward(store, v, ctx.kan[l]);
        return v[0];
    }

    std::vector<double> backward(ParamStore& store, double upstream, const HeadCtx& ctx,
                                 bool params) const override {
        std::vector<double> up{upstream};
        for (std::size_t l = layers_.size(); l-- > 0;)
            up = layers_[l].backward(store, up, ctx.kan[l], params);
        return up;
    }

    void set_calibrating(bool on) override {
        for (auto& l : layers_) l.set_calibrating(on);
    }
    void freeze_domains(ParamStore& store) override {
        for (auto& l : layers_) l.freeze_domains(store);
    }

private:
    std::vector<KanLayer> layers_;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

enum class RegressorKind { Cmlp, Ckan, MlpCoord, KanCoord };

inline std::string kind_name(RegressorKind k) {
    switch (k) {
        case RegressorKind::Cmlp: return "cmlp";
        case RegressorKind::Ckan: return "ckan";
        case RegressorKind::MlpCoord: return "mlp";
        case RegressorKind::KanCoord: return "kan";
    }
    return "?";
}

inline RegressorKind kind_from_name(const std::string& s) {
    if (s == "cmlp") return RegressorKind::Cmlp;
    if (s == "ckan") return RegressorKind::Ckan;
    if (s == "mlp") return RegressorKind::MlpCoord;
    if (s == "kan") return RegressorKind::KanCoord;
    throw std::invalid_argument("unknown regressor kind: " + s);
}

inline bool kind_is_conditional(RegressorKind k) {
    return k == RegressorKind::Cmlp || k == RegressorKind::Ckan;
}

// The differentiable map q̄ -> predicted gain (normalized dB domain) together
// with its analytic location gradient. Conditional kinds read a cached
// encoder output through bilinear sampling; coordinate-only kinds regress on
// the location alone.
class CkmModel {
public:
    CkmModel(RegressorKind kind, std::uint64_t init_seed) : kind_(kind) {
        Rng rng(init_seed);
        if (kind_is_conditional(kind_)) {
            EncoderConfig ec;
            ec.variant = kind_ == RegressorKind::Ckan ? EncoderVariant::Ckan : EncoderVariant::Cmlp;
            encoder_ = std::make_unique<Encoder>(store_, ec, rng);
            const std::size_t in_w = ec.out_channels() + 2;
            if (kind_ == RegressorKind::Ckan)
                head_ = std::make_unique<KanHead>(store_, "head", std::vector<std::size_t>{in_w, 10, 1},
                                                  8, 4, rng);
            else
                head_ = std::make_unique<MlpHead>(store_, "head",
                                                  std::vector<std::size_t>{in_w, 128, 32, 1}, rng);
            cout_idx_ = store_.add_buffer("cache.cout", Tensor({ec.out_channels(), 1, 1}));
        } else if (kind_ == RegressorKind::KanCoord) {
            head_ = std::make_unique<KanHead>(store_, "head",
                                              std::vector<std::size_t>{2, 10, 20, 10, 1}, 10, 4, rng);
        } else {
            head_ = std::make_unique<MlpHead>(store_, "head",
                                              std::vector<std::size_t>{2, 64, 128, 64, 32, 1}, rng);
        }
        norm_lo_idx_ = store_.add_buffer("norm.gain", Tensor({2}));
        extent_idx_ = store_.add_buffer("norm.extent", Tensor({4}));
    }

    RegressorKind kind() const { return kind_; }
    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    Encoder* encoder() { return encoder_.get(); }
    RegressorHead& head() { return *head_; }

    void set_gain_norm(const ChannelNorm& n) {
        store_.entry(norm_lo_idx_).value[0] = n.min;
        store_.entry(norm_lo_idx_).value[1] = n.max;
    }
    ChannelNorm gain_norm() const {
        const Tensor& t = store_.entry(norm_lo_idx_).value;
        return {t[0], t[1]};
    }
    void set_extent(const ExtentBounds& e) {
        Tensor& t = store_.entry(extent_idx_).value;
        t[0] = e.x_min;
        t[1] = e.x_max;
        t[2] = e.y_min;
        t[3] = e.y_max;
    }
    ExtentBounds extent() const {
        const Tensor& t = store_.entry(extent_idx_).value;
        return {t[0], t[1], t[2], t[3]};
    }

    // Run the encoder once and keep its output; later queries only touch the
    // cache, so the per-scene cost is a single forward pass.
    void encode_scene(const FeatureStack& stack) {
        if (!encoder_) throw std::logic_error("coordinate-only model has no encoder");
        store_.entry(cout_idx_).value = encoder_->forward(store_, stack.channels);
    }

    const Tensor& cached_features() const {
        if (!kind_is_conditional(kind_)) throw std::logic_error("no feature cache");
        const Tensor& t = store_.entry(cout_idx_).value;
        if (t.shape.size() != 3 || t.shape[1] < 2)
            throw std::logic_error("encoder output not cached; call encode_scene first");
        return t;
    }

    void set_cached_features(Tensor cout) { store_.entry(cout_idx_).value = std::move(cout); }

    struct Query {
        double value = 0.0;   // normalized dB prediction
        double d_x = 0.0;     // d value / d q̄_x
        double d_y = 0.0;
        BilinearSample sample;  // populated for conditional kinds
        HeadCtx ctx;
    };

    double predict(double qx, double qy) const {
        HeadCtx ctx;
        return forward_impl(qx, qy, ctx, nullptr);
    }

    // Prediction together with the analytic location gradient (chain of head
    // backprop, the fused-input Jacobian and the bilinear sampling
    // derivative).
    Query predict_with_gradient(double qx, double qy) const {
        Query q;
        q.value = forward_impl(qx, qy, q.ctx, &q.sample);
        // const_cast: backward touches only parameter gradients when params=true;
        // with params=false the store is read-only.
        auto& mut = const_cast<ParamStore&>(store_);
        const std::vector<double> d_in = head_->backward(mut, 1.0, q.ctx, false);
        q.d_x = d_in[0];
        q.d_y = d_in[1];
        if (kind_is_conditional(kind_)) {
            for (std::size_t c = 0; c + 2 < d_in.size(); ++c) {
                q.d_x += d_in[c + 2] * q.sample.d_x[c];
                q.d_y += d_in[c + 2] * q.sample.d_y[c];
            }
        }
        return q;
    }

    // Training-path forward; the caller later feeds the loss slope back
    // through train_backward with the same Query.
    Query train_forward(double qx, double qy) const {
        Query q;
        q.value = forward_impl(qx, qy, q.ctx, &q.sample);
        return q;
    }

    // Accumulates head parameter gradients; for conditional kinds also
    // scatters into d_cout (same shape as the cached encoder output).
    void train_backward(const Query& q, double d_value, Tensor* d_cout) {
        const std::vector<double> d_in = head_->backward(store_, d_value, q.ctx, true);
        if (kind_is_conditional(kind_) && d_cout) {
            std::vector<double> up(d_in.begin() + 2, d_in.end());
            bilinear_scatter(*d_cout, q.sample, up);
        }
    }

    std::size_t head_parameter_count() const {
        std::size_t n = 0;
        for (const auto& e : store_.entries())
            if (e.trainable && e.name.rfind("head.", 0) == 0) n += e.value.numel();
        return n;
    }

    nlohmann::json config_json() const {
        nlohmann::json j;
        j["kind"] = kind_name(kind_);
        if (kind_ == RegressorKind::Ckan) j["head"] = {{"widths", {66, 10, 1}}, {"grid", 8}, {"k", 4}};
        if (kind_ == RegressorKind::Cmlp) j["head"] = {{"widths", {130, 128, 32, 1}}};
        if (kind_ == RegressorKind::KanCoord)
            j["head"] = {{"widths", {2, 10, 20, 10, 1}}, {"grid", 10}, {"k", 4}};
        if (kind_ == RegressorKind::MlpCoord) j["head"] = {{"widths", {2, 64, 128, 64, 32, 1}}};
        return j;
    }

    void save(const std::string& path) const {
        nlohmann::json attrs = config_json();
        save_checkpoint(path, store_, attrs);
    }

    static CkmModel load(const std::string& path) {
        // peek at the manifest to learn the kind, then rebuild and fill
        ParamStore probe;
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
        const std::uint64_t len = detail::get_u64_le(is);
        std::string text(len, '\0');
        is.read(text.data(), static_cast<std::streamsize>(len));
        const auto manifest = nlohmann::json::parse(text);
        const auto kind = kind_from_name(manifest.at("attrs").at("kind").get<std::string>());
        CkmModel model(kind, 0);
        load_checkpoint(path, model.store_);
        return model;
    }

private:
    double forward_impl(double qx, double qy, HeadCtx& ctx, BilinearSample* sample_out) const {
        std::vector<double> s_reg;
        if (kind_is_conditional(kind_)) {
            BilinearSample s = bilinear_sample(cached_features(), qx, qy);
            s_reg.reserve(2 + s.value.size());
            s_reg.push_back(qx);
            s_reg.push_back(qy);
            s_reg.insert(s_reg.end(), s.value.begin(), s.value.end());
            if (sample_out) *sample_out = std::move(s);
        } else {
            s_reg = {qx, qy};
        }
        return head_->forward(store_, s_reg, ctx);
    }

    RegressorKind kind_;
    ParamStore store_;
    std::unique_ptr<Encoder> encoder_;
    std::unique_ptr<RegressorHead> head_;
    std::size_t cout_idx_ = 0;
    std::size_t norm_lo_idx_ = 0;
    std::size_t extent_idx_ = 0;
};

}  // namespace ckm
