#pragma once

#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "headsup/autodiff.hpp"
#include "headsup/identity.hpp"
#include "headsup/image.hpp"
#include "headsup/rng.hpp"
#include "headsup/tensor.hpp"

namespace headsup::model {

// ---------------------------------------------------------------------------
// Parameters and the per-forward tape.
// ---------------------------------------------------------------------------

struct Parameter {
    std::string name;
    Tensor value;
    bool trainable = true;
    // AdamW state, allocated lazily by the optimizer.
    Tensor adam_m, adam_v;
    int64_t adam_step = 0;
};
using ParamPtr = std::shared_ptr<Parameter>;

class ParamStore {
public:
    ParamPtr create(const std::string& name, Tensor value, bool trainable = true) {
        if (index_.count(name)) throw ContractViolation("ParamStore: duplicate name " + name);
        auto p = std::make_shared<Parameter>();
        p->name = name;
        p->value = std::move(value);
        p->trainable = trainable;
        index_[name] = params_.size();
        params_.push_back(p);
        return p;
    }

    const std::vector<ParamPtr>& all() const { return params_; }

    ParamPtr find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractViolation("ParamStore: unknown parameter " + name);
        return params_[it->second];
    }

    std::vector<ParamPtr> trainable() const {
        std::vector<ParamPtr> out;
        for (const auto& p : params_)
            if (p->trainable) out.push_back(p);
        return out;
    }

private:
    std::vector<ParamPtr> params_;
    std::unordered_map<std::string, size_t> index_;
};

// Per-forward cache mapping parameters to graph leaves so that re-used
// modules (e.g. the encoder run on both LQ and reference) accumulate
// gradients on the same leaf.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    ad::Var use(const ParamPtr& p) {
        auto it = cache_.find(p.get());
        if (it != cache_.end()) return it->second;
        ad::Var v = ad::Var::leaf(p->value, grad_enabled_ && p->trainable);
        cache_.emplace(p.get(), v);
        return v;
    }

    bool used(const ParamPtr& p) const { return cache_.count(p.get()) > 0; }

    Tensor grad_of(const ParamPtr& p) const {
        auto it = cache_.find(p.get());
        if (it == cache_.end()) return Tensor::zeros(p->value.shape());
        return it->second.grad_or_zero();
    }

private:
    bool grad_enabled_;
    std::unordered_map<const Parameter*, ad::Var> cache_;
};

// ---------------------------------------------------------------------------
// Layers.
// ---------------------------------------------------------------------------

struct LoRAConfig {
    int rank = 4;
    double scale = 1.0;
    void validate() const {
        if (rank < 1) throw RangeError("LoRAConfig: rank must be >= 1");
    }
};

struct Conv2d {
    ParamPtr w;  // (out, in, k, k)
    ParamPtr b;  // (out) or null
    int stride = 1, pad = 0;

    int in_channels() const { return w->value.dim(1); }
    int out_channels() const { return w->value.dim(0); }
    int kernel() const { return w->value.dim(2); }

    ad::Var forward(Tape& t, const ad::Var& x) const {
        return ad::conv2d(x, t.use(w), b ? t.use(b) : ad::Var(), stride, pad);
    }
};

struct ConvTranspose2d {
    ParamPtr w;  // (in, out, k, k)
    ParamPtr b;
    int stride = 1, pad = 0;

    ad::Var forward(Tape& t, const ad::Var& x) const {
        return ad::conv_transpose2d(x, t.use(w), b ? t.use(b) : ad::Var(), stride, pad);
    }
};

struct Linear {
    ParamPtr w;  // (out, in)
    ParamPtr b;

    ad::Var forward(Tape& t, const ad::Var& x) const {
        return ad::matvec(t.use(w), x, b ? t.use(b) : ad::Var());
    }
};

namespace init {

inline Tensor kaiming(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    double std = std::sqrt(2.0 / fan_in);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * std;
    return t;
}

}  // namespace init

inline Conv2d make_conv(ParamStore& ps, const std::string& name, int in, int out, int k,
                        int stride, int pad, Rng& rng, bool bias = true) {
    Conv2d c;
    c.w = ps.create(name + ".w", init::kaiming({out, in, k, k}, in * k * k, rng));
    if (bias) c.b = ps.create(name + ".b", Tensor::zeros({out}));
    c.stride = stride;
    c.pad = pad;
    return c;
}

inline ConvTranspose2d make_conv_transpose(ParamStore& ps, const std::string& name, int in,
                                           int out, int k, int stride, int pad, Rng& rng,
                                           bool bias = true) {
    ConvTranspose2d c;
    c.w = ps.create(name + ".w", init::kaiming({in, out, k, k}, in * k * k, rng));
    if (bias) c.b = ps.create(name + ".b", Tensor::zeros({out}));
    c.stride = stride;
    c.pad = pad;
    return c;
}

inline Linear make_linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
                          bool bias = true) {
    Linear l;
    l.w = ps.create(name + ".w", init::kaiming({out, in}, in, rng));
    if (bias) l.b = ps.create(name + ".b", Tensor::zeros({out}));
    return l;
}

// ---------------------------------------------------------------------------
// LoRA adapters: y = base(x) + (scale/rank) * B(A(x)), A Kaiming, B zero.
// Wrapping freezes the base parameters; only A and B train.
// ---------------------------------------------------------------------------

struct LoraConv2d {
    Conv2d base;
    Conv2d down;  // A: in -> rank, base kernel/stride/pad
    Conv2d up;    // B: rank -> out, 1x1, zero-init
    double scale = 1.0;
    int rank = 4;

    ad::Var forward(Tape& t, const ad::Var& x, bool with_lora = true) const {
        ad::Var y = base.forward(t, x);
        if (!with_lora) return y;
        ad::Var l = up.forward(t, down.forward(t, x));
        return ad::add(y, ad::mul(l, scale / rank));
    }
};

inline LoraConv2d lora_wrap(ParamStore& ps, Conv2d base, const LoRAConfig& cfg, Rng& rng) {
    cfg.validate();
    LoraConv2d out;
    base.w->trainable = false;
    if (base.b) base.b->trainable = false;
    const std::string stem = base.w->name.substr(0, base.w->name.size() - 2);
    const int in = base.in_channels(), oc = base.out_channels(), k = base.kernel();
    out.base = base;
    out.down.w = ps.create(stem + ".lora_A", init::kaiming({cfg.rank, in, k, k}, in * k * k, rng));
    out.down.stride = base.stride;
    out.down.pad = base.pad;
    out.up.w = ps.create(stem + ".lora_B", Tensor::zeros({oc, cfg.rank, 1, 1}));
    out.up.stride = 1;
    out.up.pad = 0;
    out.scale = cfg.scale;
    out.rank = cfg.rank;
    return out;
}

struct LoraLinear {
    Linear base;
    Linear down;  // A: in -> rank
    Linear up;    // B: rank -> out, zero-init
    double scale = 1.0;
    int rank = 4;

    ad::Var forward(Tape& t, const ad::Var& x, bool with_lora = true) const {
        ad::Var y = base.forward(t, x);
        if (!with_lora) return y;
        ad::Var l = up.forward(t, down.forward(t, x));
        return ad::add(y, ad::mul(l, scale / rank));
    }
};

inline LoraLinear lora_wrap(ParamStore& ps, Linear base, const LoRAConfig& cfg, Rng& rng) {
    cfg.validate();
    LoraLinear out;
    base.w->trainable = false;
    if (base.b) base.b->trainable = false;
    const std::string stem = base.w->name.substr(0, base.w->name.size() - 2);
    const int in = base.w->value.dim(1), oc = base.w->value.dim(0);
    out.base = base;
    out.down.w = ps.create(stem + ".lora_A", init::kaiming({cfg.rank, in}, in, rng));
    out.up.w = ps.create(stem + ".lora_B", Tensor::zeros({oc, cfg.rank}));
    out.scale = cfg.scale;
    out.rank = cfg.rank;
    return out;
}

// ---------------------------------------------------------------------------
// Zero-initialized input-channel extension of a 4-channel convolution:
// the first 4 channel slices keep the base weights (frozen), the extra
// slices start at zero (trainable) so extra inputs are ignored at init.
// Functionally equivalent to one (out, 4+extra, k, k) convolution.
// ---------------------------------------------------------------------------

struct ExtendedConv2d {
    ParamPtr w_base;   // (out, 4, k, k), frozen copy of the base weights
    ParamPtr w_extra;  // (out, extra, k, k), zero-init, trainable
    ParamPtr b;        // copied from base, frozen
    int stride = 1, pad = 0;

    int base_in() const { return w_base->value.dim(1); }
    int extra_in() const { return w_extra->value.dim(1); }
    int out_channels() const { return w_base->value.dim(0); }

    std::vector<int> weight_shape() const {
        return {out_channels(), base_in() + extra_in(), w_base->value.dim(2),
                w_base->value.dim(3)};
    }

    // Materialized (out, base+extra, k, k) view of the effective weight.
    Tensor combined_weight() const {
        const int o = out_channels(), cb = base_in(), ce = extra_in(), k = w_base->value.dim(2);
        Tensor w({o, cb + ce, k, k});
        for (int oc = 0; oc < o; ++oc) {
            for (int c = 0; c < cb; ++c)
                for (int i = 0; i < k * k; ++i)
                    w[((static_cast<int64_t>(oc) * (cb + ce) + c) * k * k) + i] =
                        w_base->value[((static_cast<int64_t>(oc) * cb + c) * k * k) + i];
            for (int c = 0; c < ce; ++c)
                for (int i = 0; i < k * k; ++i)
                    w[((static_cast<int64_t>(oc) * (cb + ce) + cb + c) * k * k) + i] =
                        w_extra->value[((static_cast<int64_t>(oc) * ce + c) * k * k) + i];
        }
        return w;
    }

    ad::Var forward(Tape& t, const ad::Var& x) const {
        const int cb = base_in(), ce = extra_in();
        if (x.value().dim(0) != cb + ce)
            throw ShapeError("ExtendedConv2d: expected " + std::to_string(cb + ce) + " channels");
        ad::Var head = ad::slice_channels(x, 0, cb);
        ad::Var tail = ad::slice_channels(x, cb, cb + ce);
        ad::Var y = ad::conv2d(head, t.use(w_base), b ? t.use(b) : ad::Var(), stride, pad);
        ad::Var e = ad::conv2d(tail, t.use(w_extra), ad::Var(), stride, pad);
        return ad::add(y, e);
    }
};

inline ExtendedConv2d extend_input_conv(ParamStore& ps, const Conv2d& conv, int extra_channels) {
    if (conv.in_channels() != 4)
        throw ShapeError("extend_input_conv: base conv must have 4 input channels");
    if (extra_channels < 1) throw RangeError("extend_input_conv: extra_channels must be >= 1");
    ExtendedConv2d out;
    const std::string stem = conv.w->name.substr(0, conv.w->name.size() - 2);
    Tensor wb = conv.w->value;
    out.w_base = ps.create(stem + ".ext_base", std::move(wb), /*trainable=*/false);
    out.w_extra = ps.create(
        stem + ".ext_extra",
        Tensor::zeros({conv.out_channels(), extra_channels, conv.kernel(), conv.kernel()}));
    if (conv.b) out.b = ps.create(stem + ".ext_bias", conv.b->value, /*trainable=*/false);
    out.stride = conv.stride;
    out.pad = conv.pad;
    return out;
}

// First denoiser convolution: extended input + its own LoRA adapter over the
// full (base+extra)-channel input.
struct CondInputConv {
    ExtendedConv2d ext;
    Conv2d lora_down;
    Conv2d lora_up;
    double scale = 1.0;
    int rank = 4;

    ad::Var forward(Tape& t, const ad::Var& x, bool with_lora = true) const {
        ad::Var y = ext.forward(t, x);
        if (!with_lora) return y;
        ad::Var l = lora_up.forward(t, lora_down.forward(t, x));
        return ad::add(y, ad::mul(l, scale / rank));
    }
};

// ---------------------------------------------------------------------------
// Diffusion schedule.
// ---------------------------------------------------------------------------

// Linear beta schedule; returns the cumulative product table
// alpha_bar[t] = prod_{s<=t} (1 - beta_s) for t in [0, T).
inline std::vector<double> make_schedule(int T, double beta_lo, double beta_hi) {
    if (T < 1) throw RangeError("make_schedule: T must be >= 1");
    if (!(beta_lo > 0.0) || !(beta_lo <= beta_hi) || !(beta_hi < 1.0))
        throw RangeError("make_schedule: need 0 < beta_lo <= beta_hi < 1");
    std::vector<double> alpha_bar(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        double beta = T == 1 ? beta_lo : beta_lo + (beta_hi - beta_lo) * t / (T - 1);
        prod *= 1.0 - beta;
        alpha_bar[static_cast<size_t>(t)] = prod;
    }
    return alpha_bar;
}

struct DiffusionScalars {
    int t_star = 0;
    double alpha = 1.0;  // sqrt(alpha_bar)
    double beta = 0.0;   // sqrt(1 - alpha_bar)

    static DiffusionScalars at(const std::vector<double>& alpha_bar, int t) {
        if (t < 0 || t >= static_cast<int>(alpha_bar.size()))
            throw RangeError("DiffusionScalars: timestep out of range");
        DiffusionScalars s;
        s.t_star = t;
        s.alpha = std::sqrt(alpha_bar[static_cast<size_t>(t)]);
        s.beta = std::sqrt(1.0 - alpha_bar[static_cast<size_t>(t)]);
        s.validate();
        return s;
    }

    void validate() const {
        if (!(alpha > 0.0) || !(alpha < 1.0))
            throw RangeError("DiffusionScalars: alpha out of (0,1)");
        if (std::abs(alpha * alpha + beta * beta - 1.0) > 1e-9)
            throw RangeError("DiffusionScalars: alpha^2 + beta^2 != 1");
    }
};

// ---------------------------------------------------------------------------
// Face mask on the LQ pixel grid. All-zero means "no reference".
// ---------------------------------------------------------------------------

struct FaceMask {
    Tensor m;  // (h, w), values in {0, 1}

    static FaceMask zeros(int h, int w) { return FaceMask{Tensor({h, w}, 0.0)}; }

    // Box in [x0, y0, x1, y1) pixel coordinates on the same grid.
    static FaceMask from_box(int h, int w, double x0, double y0, double x1, double y1) {
        FaceMask f = zeros(h, w);
        int ix0 = std::max(0, static_cast<int>(std::floor(x0)));
        int iy0 = std::max(0, static_cast<int>(std::floor(y0)));
        int ix1 = std::min(w, static_cast<int>(std::ceil(x1)));
        int iy1 = std::min(h, static_cast<int>(std::ceil(y1)));
        for (int y = iy0; y < iy1; ++y)
            for (int x = ix0; x < ix1; ++x) f.m[static_cast<int64_t>(y) * w + x] = 1.0;
        return f;
    }

    void validate() const {
        if (m.rank() != 2) throw ShapeError("FaceMask: expected (h, w)");
        for (int64_t i = 0; i < m.numel(); ++i)
            if (m[i] != 0.0 && m[i] != 1.0) throw ContractViolation("FaceMask: values must be 0/1");
    }

    bool any() const {
        for (int64_t i = 0; i < m.numel(); ++i)
            if (m[i] != 0.0) return true;
        return false;
    }

    // Bounding box [x0, y0, x1, y1) of the nonzero region; all-zero -> zeros.
    std::array<int, 4> bbox() const {
        const int h = m.dim(0), w = m.dim(1);
        int x0 = w, y0 = h, x1 = 0, y1 = 0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (m[static_cast<int64_t>(y) * w + x] != 0.0) {
                    x0 = std::min(x0, x);
                    y0 = std::min(y0, y);
                    x1 = std::max(x1, x + 1);
                    y1 = std::max(y1, y + 1);
                }
        if (x1 <= x0) return {0, 0, 0, 0};
        return {x0, y0, x1, y1};
    }
};

// ---------------------------------------------------------------------------
// Toy VAE. The encoder has 3 stride-2 stages down to a 4-channel latent and
// is LoRA-adapted for restoration training; the decoder is frozen after
// autoencoder pretraining. Deterministic (no KL sampling).
// ---------------------------------------------------------------------------

struct VaeEncoder {
    LoraConv2d c1, c2, c3, c4;

    ad::Var forward(Tape& t, const ad::Var& x, bool with_lora = true) const {
        using namespace ad;
        Var h = silu(c1.forward(t, x, with_lora));
        h = silu(c2.forward(t, h, with_lora));
        h = silu(c3.forward(t, h, with_lora));
        return c4.forward(t, h, with_lora);
    }
};

struct VaeDecoder {
    Conv2d c1;           // 4 -> 64 @ latent res
    ConvTranspose2d u1;  // 64 -> 32, x2
    ConvTranspose2d u2;  // 32 -> 16, x2
    ConvTranspose2d u3;  // 16 -> 16, x2
    Conv2d c2;           // 16 -> 3

    ad::Var forward(Tape& t, const ad::Var& z) const {
        using namespace ad;
        Var h = silu(c1.forward(t, z));
        h = silu(u1.forward(t, h));
        h = silu(u2.forward(t, h));
        h = silu(u3.forward(t, h));
        return sigmoid(c2.forward(t, h));
    }
};

// ---------------------------------------------------------------------------
// Denoiser: small U-Net (3 scales, widths 32/64/128), residual blocks with a
// timestep embedding added per block, outermost skip connections, and a
// zero-initialized output conv plus an input residual so that at
// initialization eps(z, ...) == z exactly.
// ---------------------------------------------------------------------------

struct UNetBlock {
    LoraConv2d conv1, conv2;
    LoraLinear temb_proj;

    ad::Var forward(Tape& t, const ad::Var& x, const ad::Var& temb, bool with_lora) const {
        using namespace ad;
        Var h = conv1.forward(t, x, with_lora);
        h = silu(add_channel_bias(h, temb_proj.forward(t, temb, with_lora)));
        h = conv2.forward(t, h, with_lora);
        return silu(add(h, x));
    }
};

struct UNet {
    static constexpr int kTembDim = 64;

    CondInputConv conv_in;  // 4(+5) -> 32
    UNetBlock e1;           // 32
    LoraConv2d down1;       // 32 -> 64, s2
    UNetBlock e2;           // 64
    LoraConv2d down2;       // 64 -> 128, s2
    UNetBlock mid;          // 128
    LoraConv2d up2;         // after nearest x2: 128 -> 64
    LoraConv2d fuse2;       // cat(64, 64) -> 64
    UNetBlock d2;           // 64
    LoraConv2d up1;         // after nearest x2: 64 -> 32
    LoraConv2d fuse1;       // cat(32, 32) -> 32
    UNetBlock d1;           // 32
    LoraConv2d conv_out;    // 32 -> 4, base zero-init
    LoraLinear temb1, temb2;
    Linear ctx_proj;  // optional context vector (always zero here), no bias

    // x: (9, h, w) = [z_L(4), z_r(4), mask(1)]; returns predicted noise (4,h,w).
    ad::Var forward(Tape& t, const ad::Var& x, const Tensor& temb_base, const Tensor& context,
                    bool with_lora = true) const {
        using namespace ad;
        Var temb = silu(temb1.forward(t, Var::constant(temb_base), with_lora));
        temb = temb2.forward(t, temb, with_lora);
        temb = add(temb, ctx_proj.forward(t, Var::constant(context)));

        Var z_l = slice_channels(x, 0, 4);
        Var h0 = silu(conv_in.forward(t, x, with_lora));
        Var he1 = e1.forward(t, h0, temb, with_lora);
        Var hd1 = silu(down1.forward(t, he1, with_lora));
        Var he2 = e2.forward(t, hd1, temb, with_lora);
        Var hd2 = silu(down2.forward(t, he2, with_lora));
        Var hm = mid.forward(t, hd2, temb, with_lora);

        Var u2h = upsample_nearest2d(hm, he2.value().dim(1), he2.value().dim(2));
        u2h = silu(up2.forward(t, u2h, with_lora));
        Var f2 = silu(fuse2.forward(t, concat_channels({u2h, he2}), with_lora));
        Var hd2b = d2.forward(t, f2, temb, with_lora);

        Var u1h = upsample_nearest2d(hd2b, he1.value().dim(1), he1.value().dim(2));
        u1h = silu(up1.forward(t, u1h, with_lora));
        Var f1 = silu(fuse1.forward(t, concat_channels({u1h, he1}), with_lora));
        Var hd1b = d1.forward(t, f1, temb, with_lora);

        Var eps = conv_out.forward(t, hd1b, with_lora);
        return add(eps, z_l);
    }
};

inline Tensor sinusoidal_embedding(double t, int dim) {
    Tensor e({dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        e[i] = std::sin(t * freq);
        e[half + i] = std::cos(t * freq);
    }
    return e;
}

// ---------------------------------------------------------------------------
// The assembled restoration model.
// ---------------------------------------------------------------------------

struct ModelConfig {
    int upscale_factor = 4;
    int latent_down = 8;   // fixed by the VAE architecture
    int latent_channels = 4;
    int t_star = 999;
    int schedule_T = 1000;
    double beta_lo = 1e-4;
    double beta_hi = 2e-2;
    LoRAConfig lora;
    int context_dim = 16;

    void validate() const {
        if (upscale_factor < 1) throw RangeError("ModelConfig: upscale_factor must be >= 1");
        lora.validate();
        if (t_star < 0 || t_star >= schedule_T)
            throw RangeError("ModelConfig: t_star out of schedule range");
    }
};

struct Model {
    ModelConfig cfg;
    ParamStore store;
    VaeEncoder encoder;
    VaeDecoder decoder;
    UNet unet;
    std::vector<double> alpha_bar;
    Tensor temb_base;
    Tensor context;  // always zero (text conditioning is out of scope)

    DiffusionScalars scalars() const { return DiffusionScalars::at(alpha_bar, cfg.t_star); }
};

inline Model build_model(const ModelConfig& cfg, uint64_t init_seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.alpha_bar = make_schedule(cfg.schedule_T, cfg.beta_lo, cfg.beta_hi);
    m.temb_base = sinusoidal_embedding(static_cast<double>(cfg.t_star), UNet::kTembDim);
    m.context = Tensor::zeros({cfg.context_dim});
    Rng rng(init_seed);
    ParamStore& ps = m.store;
    const LoRAConfig& lc = cfg.lora;

    // VAE encoder: 3 stride-2 stages to a 4-channel latent.
    m.encoder.c1 = lora_wrap(ps, make_conv(ps, "enc.c1", 3, 32, 3, 2, 1, rng), lc, rng);
    m.encoder.c2 = lora_wrap(ps, make_conv(ps, "enc.c2", 32, 64, 3, 2, 1, rng), lc, rng);
    m.encoder.c3 = lora_wrap(ps, make_conv(ps, "enc.c3", 64, 64, 3, 2, 1, rng), lc, rng);
    m.encoder.c4 =
        lora_wrap(ps, make_conv(ps, "enc.c4", 64, cfg.latent_channels, 3, 1, 1, rng), lc, rng);

    // VAE decoder (frozen after pretraining; never LoRA-adapted).
    m.decoder.c1 = make_conv(ps, "dec.c1", cfg.latent_channels, 64, 3, 1, 1, rng);
    m.decoder.u1 = make_conv_transpose(ps, "dec.u1", 64, 32, 2, 2, 0, rng);
    m.decoder.u2 = make_conv_transpose(ps, "dec.u2", 32, 16, 2, 2, 0, rng);
    m.decoder.u3 = make_conv_transpose(ps, "dec.u3", 16, 16, 2, 2, 0, rng);
    m.decoder.c2 = make_conv(ps, "dec.c2", 16, 3, 3, 1, 1, rng);

    // Denoiser.
    auto block = [&](const std::string& name, int c) {
        UNetBlock b;
        b.conv1 = lora_wrap(ps, make_conv(ps, name + ".conv1", c, c, 3, 1, 1, rng), lc, rng);
        b.conv2 = lora_wrap(ps, make_conv(ps, name + ".conv2", c, c, 3, 1, 1, rng), lc, rng);
        b.temb_proj =
            lora_wrap(ps, make_linear(ps, name + ".temb", UNet::kTembDim, c, rng), lc, rng);
        return b;
    };
    {
        // The 4-channel base conv exists only transiently; its weights move
        // into the extended layer.
        ParamStore scratch;
        Conv2d cin = make_conv(scratch, "unet.conv_in", 4, 32, 3, 1, 1, rng);
        CondInputConv cic;
        cic.ext = extend_input_conv(ps, cin, 5);
        cic.lora_down.w =
            ps.create("unet.conv_in.lora_A", init::kaiming({lc.rank, 9, 3, 3}, 9 * 9, rng));
        cic.lora_down.stride = 1;
        cic.lora_down.pad = 1;
        cic.lora_up.w = ps.create("unet.conv_in.lora_B", Tensor::zeros({32, lc.rank, 1, 1}));
        cic.scale = lc.scale;
        cic.rank = lc.rank;
        m.unet.conv_in = cic;
    }
    m.unet.e1 = block("unet.e1", 32);
    m.unet.down1 = lora_wrap(ps, make_conv(ps, "unet.down1", 32, 64, 3, 2, 1, rng), lc, rng);
    m.unet.e2 = block("unet.e2", 64);
    m.unet.down2 = lora_wrap(ps, make_conv(ps, "unet.down2", 64, 128, 3, 2, 1, rng), lc, rng);
    m.unet.mid = block("unet.mid", 128);
    m.unet.up2 = lora_wrap(ps, make_conv(ps, "unet.up2", 128, 64, 3, 1, 1, rng), lc, rng);
    m.unet.fuse2 = lora_wrap(ps, make_conv(ps, "unet.fuse2", 128, 64, 3, 1, 1, rng), lc, rng);
    m.unet.d2 = block("unet.d2", 64);
    m.unet.up1 = lora_wrap(ps, make_conv(ps, "unet.up1", 64, 32, 3, 1, 1, rng), lc, rng);
    m.unet.fuse1 = lora_wrap(ps, make_conv(ps, "unet.fuse1", 64, 32, 3, 1, 1, rng), lc, rng);
    m.unet.d1 = block("unet.d1", 32);
    {
        // Zero-initialized output conv: at init the denoiser is exactly the
        // input residual.
        Conv2d cout;
        cout.w = ps.create("unet.conv_out.w", Tensor::zeros({4, 32, 3, 3}));
        cout.b = ps.create("unet.conv_out.b", Tensor::zeros({4}));
        cout.stride = 1;
        cout.pad = 1;
        m.unet.conv_out = lora_wrap(ps, cout, lc, rng);
    }
    m.unet.temb1 =
        lora_wrap(ps, make_linear(ps, "unet.temb1", UNet::kTembDim, UNet::kTembDim, rng), lc, rng);
    m.unet.temb2 =
        lora_wrap(ps, make_linear(ps, "unet.temb2", UNet::kTembDim, UNet::kTembDim, rng), lc, rng);
    m.unet.ctx_proj = make_linear(ps, "unet.ctx", cfg.context_dim, UNet::kTembDim, rng,
                                  /*bias=*/false);
    m.unet.ctx_proj.w->trainable = false;
    return m;
}

// During autoencoder pretraining the VAE bases (and decoder) are the
// trainable set; adapters and denoiser stay untouched.
inline void set_pretrain_mode(Model& m) {
    for (const auto& p : m.store.all()) {
        bool is_vae_base = (p->name.rfind("enc.", 0) == 0 || p->name.rfind("dec.", 0) == 0) &&
                           p->name.find(".lora_") == std::string::npos;
        p->trainable = is_vae_base;
    }
}

// Restoration training: only LoRA adapters and the extended input channels
// train; every base weight and the whole decoder are frozen.
inline void set_restore_mode(Model& m) {
    for (const auto& p : m.store.all()) {
        bool adapter = p->name.find(".lora_") != std::string::npos;
        bool extra = p->name.find(".ext_extra") != std::string::npos;
        p->trainable = adapter || extra;
    }
}

// ---------------------------------------------------------------------------
// One-step DDIM estimate: z_hat = (z_L - beta * eps) / alpha, with the noise
// prediction produced from the concatenation [z_L, z_r, mask_resized].
// ---------------------------------------------------------------------------

using NoisePredictorFn = std::function<ad::Var(const ad::Var& latent9)>;

inline ad::Var denoise_one_step(const ad::Var& z_l, const ad::Var& z_r, const FaceMask& mask,
                                const DiffusionScalars& s, const NoisePredictorFn& predict) {
    using namespace ad;
    const Tensor& zl = z_l.value();
    const Tensor& zr = z_r.value();
    if (zl.rank() != 3 || zl.dim(0) != 4) throw ShapeError("denoise_one_step: z_L must be (4,h,w)");
    if (!zl.same_shape(zr)) throw ShapeError("denoise_one_step: latent resolution mismatch");
    s.validate();

    // Nearest-neighbor mask resize to latent resolution.
    Tensor m3({1, mask.m.dim(0), mask.m.dim(1)});
    for (int64_t i = 0; i < mask.m.numel(); ++i) m3[i] = mask.m[i];
    Var mask_lat = upsample_nearest2d(Var::constant(m3), zl.dim(1), zl.dim(2));

    Var cat = concat_channels({z_l, z_r, mask_lat});
    Var eps = predict(cat);
    if (!eps.value().same_shape(zl))
        throw ShapeError("denoise_one_step: predictor returned wrong shape");
    return div(sub(z_l, mul(eps, s.beta)), s.alpha);
}

// ---------------------------------------------------------------------------
// Full 3-step restoration: encode (LQ upsampled to HQ scale; reference pasted
// onto a black canvas at the mask box), one-step denoise, decode.
// ---------------------------------------------------------------------------

inline Tensor paste_reference_canvas(const id::MaybeFace& x_r, const FaceMask& mask, int out_h,
                                     int out_w, int factor) {
    Tensor canvas({3, out_h, out_w}, 0.0);
    if (!x_r.present()) return canvas;
    auto bb = mask.bbox();
    if (bb[2] <= bb[0]) return canvas;
    int x0 = bb[0] * factor, y0 = bb[1] * factor;
    int x1 = std::min(out_w, bb[2] * factor), y1 = std::min(out_h, bb[3] * factor);
    if (x1 <= x0 || y1 <= y0) return canvas;
    Tensor patch = img::resize(x_r.get(), y1 - y0, x1 - x0, img::Resample::kBilinear);
    for (int c = 0; c < 3; ++c)
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) canvas.at(c, y, x) = patch.at(c, y - y0, x - x0);
    return canvas;
}

inline ad::Var restore(Tape& tape, const Model& m, const Tensor& x_l, const id::MaybeFace& x_r,
                       const FaceMask& mask, bool with_lora = true,
                       ad::Var* out_latent = nullptr) {
    using namespace ad;
    require_image(x_l, "restore");
    mask.validate();
    if (mask.m.dim(0) != x_l.dim(1) || mask.m.dim(1) != x_l.dim(2))
        throw ShapeError("restore: mask must live on the LQ pixel grid");
    if (!x_r.present() && mask.any())
        throw ContractViolation("restore: nonzero mask without a reference face");

    const int factor = m.cfg.upscale_factor;
    const int out_h = x_l.dim(1) * factor, out_w = x_l.dim(2) * factor;
    if (out_h % m.cfg.latent_down != 0 || out_w % m.cfg.latent_down != 0)
        throw ShapeError("restore: output size must be divisible by 8");

    Tensor up = factor > 1 ? img::resize(x_l, out_h, out_w, img::Resample::kBicubic) : x_l;
    Var z_l = m.encoder.forward(tape, Var::constant(up), with_lora);

    Var z_r;
    if (x_r.present()) {
        Tensor canvas = paste_reference_canvas(x_r, mask, out_h, out_w, factor);
        z_r = m.encoder.forward(tape, Var::constant(canvas), with_lora);
    } else {
        z_r = Var::constant(Tensor::zeros(z_l.value().shape()));
    }

    auto predictor = [&](const ad::Var& cat) {
        return m.unet.forward(tape, cat, m.temb_base, m.context, with_lora);
    };
    Var z_hat = denoise_one_step(z_l, z_r, mask, m.scalars(), predictor);
    if (out_latent) *out_latent = z_hat;
    return clamp(m.decoder.forward(tape, z_hat), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Discriminator: 4-layer strided patch discriminator on aligned face crops.
// Smooth activations keep every loss gradient finite-difference checkable.
// ---------------------------------------------------------------------------

struct Discriminator {
    ParamStore store;
    Conv2d c1, c2, c3, c4;

    ad::Var forward(Tape& t, const ad::Var& face) const {
        using namespace ad;
        Var h = silu(c1.forward(t, face));
        h = silu(c2.forward(t, h));
        h = silu(c3.forward(t, h));
        return c4.forward(t, h);
    }
};

inline Discriminator build_discriminator(uint64_t seed) {
    Discriminator d;
    Rng rng(seed);
    d.c1 = make_conv(d.store, "disc.c1", 3, 32, 3, 2, 1, rng);
    d.c2 = make_conv(d.store, "disc.c2", 32, 64, 3, 2, 1, rng);
    d.c3 = make_conv(d.store, "disc.c3", 64, 128, 3, 2, 1, rng);
    d.c4 = make_conv(d.store, "disc.c4", 128, 1, 3, 1, 1, rng);
    return d;
}

// ---------------------------------------------------------------------------
// Checkpoints: "headsup-ckpt-v1" — a JSON metadata record plus a flat archive
// of named float64 arrays (little endian).
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "headsup-ckpt-v1";

inline void save_checkpoint(const std::string& path, const Model& m, const Discriminator* disc,
                            const nlohmann::json& extra) {
    nlohmann::ordered_json meta;
    meta["format"] = kCheckpointMagic;
    meta["model_config"] = {
        {"upscale_factor", m.cfg.upscale_factor}, {"latent_down", m.cfg.latent_down},
        {"latent_channels", m.cfg.latent_channels}, {"t_star", m.cfg.t_star},
        {"schedule_T", m.cfg.schedule_T},         {"beta_lo", m.cfg.beta_lo},
        {"beta_hi", m.cfg.beta_hi},               {"lora_rank", m.cfg.lora.rank},
        {"lora_scale", m.cfg.lora.scale},         {"context_dim", m.cfg.context_dim}};
    meta["extra"] = extra;

    auto add_arrays = [](nlohmann::ordered_json& idx, const std::string& prefix,
                         const ParamStore& ps, int64_t& offset) {
        for (const auto& p : ps.all()) {
            nlohmann::ordered_json rec;
            rec["shape"] = p->value.shape();
            rec["offset"] = offset;
            rec["trainable"] = p->trainable;
            rec["adam_step"] = p->adam_step;
            bool has_adam = p->adam_m.defined();
            rec["adam"] = has_adam;
            idx[prefix + p->name] = rec;
            offset += p->value.numel() * (has_adam ? 3 : 1);
        }
    };
    int64_t offset = 0;
    nlohmann::ordered_json index;
    add_arrays(index, "", m.store, offset);
    if (disc) add_arrays(index, "disc/", disc->store, offset);
    meta["arrays"] = index;
    meta["total_doubles"] = offset;

    std::string meta_str = meta.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_checkpoint: cannot open " + path);
    f << kCheckpointMagic << "\n";
    uint64_t len = meta_str.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

    auto write_store = [&f](const ParamStore& ps) {
        for (const auto& p : ps.all()) {
            f.write(reinterpret_cast<const char*>(p->value.data()),
                    static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
            if (p->adam_m.defined()) {
                f.write(reinterpret_cast<const char*>(p->adam_m.data()),
                        static_cast<std::streamsize>(p->adam_m.numel() * sizeof(double)));
                f.write(reinterpret_cast<const char*>(p->adam_v.data()),
                        static_cast<std::streamsize>(p->adam_v.numel() * sizeof(double)));
            }
        }
    };
    write_store(m.store);
    if (disc) write_store(disc->store);
    if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

struct Checkpoint {
    nlohmann::json meta;
    std::vector<double> data;

    ModelConfig model_config() const {
        const auto& mc = meta.at("model_config");
        ModelConfig cfg;
        cfg.upscale_factor = mc.at("upscale_factor").get<int>();
        cfg.latent_down = mc.at("latent_down").get<int>();
        cfg.latent_channels = mc.at("latent_channels").get<int>();
        cfg.t_star = mc.at("t_star").get<int>();
        cfg.schedule_T = mc.at("schedule_T").get<int>();
        cfg.beta_lo = mc.at("beta_lo").get<double>();
        cfg.beta_hi = mc.at("beta_hi").get<double>();
        cfg.lora.rank = mc.at("lora_rank").get<int>();
        cfg.lora.scale = mc.at("lora_scale").get<double>();
        cfg.context_dim = mc.at("context_dim").get<int>();
        return cfg;
    }

    void load_into(const std::string& prefix, ParamStore& ps) const {
        const auto& arrays = meta.at("arrays");
        for (const auto& p : ps.all()) {
            auto it = arrays.find(prefix + p->name);
            if (it == arrays.end())
                throw IoError("Checkpoint: missing array " + prefix + p->name);
            const auto& rec = *it;
            std::vector<int> shape = rec.at("shape").get<std::vector<int>>();
            if (shape != p->value.shape())
                throw IoError("Checkpoint: shape mismatch for " + p->name);
            int64_t off = rec.at("offset").get<int64_t>();
            int64_t n = p->value.numel();
            std::memcpy(p->value.data(), data.data() + off, static_cast<size_t>(n) * sizeof(double));
            p->trainable = rec.at("trainable").get<bool>();
            p->adam_step = rec.at("adam_step").get<int64_t>();
            if (rec.at("adam").get<bool>()) {
                p->adam_m = Tensor(p->value.shape());
                p->adam_v = Tensor(p->value.shape());
                std::memcpy(p->adam_m.data(), data.data() + off + n,
                            static_cast<size_t>(n) * sizeof(double));
                std::memcpy(p->adam_v.data(), data.data() + off + 2 * n,
                            static_cast<size_t>(n) * sizeof(double));
            } else {
                p->adam_m = Tensor();
                p->adam_v = Tensor();
            }
        }
    }
};

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_checkpoint: cannot open " + path);
    std::string magic;
    std::getline(f, magic);
    if (magic != kCheckpointMagic)
        throw IoError("read_checkpoint: bad format tag in " + path);
    uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string meta_str(len, '\0');
    f.read(meta_str.data(), static_cast<std::streamsize>(len));
    Checkpoint ck;
    ck.meta = nlohmann::json::parse(meta_str);
    int64_t total = ck.meta.at("total_doubles").get<int64_t>();
    ck.data.resize(static_cast<size_t>(total));
    f.read(reinterpret_cast<char*>(ck.data.data()),
           static_cast<std::streamsize>(static_cast<size_t>(total) * sizeof(double)));
    if (!f) throw IoError("read_checkpoint: truncated file " + path);
    return ck;
}

// Rebuild a model from a checkpoint (architecture from metadata, weights from
// the archive).
inline Model load_model(const Checkpoint& ck) {
    Model m = build_model(ck.model_config(), /*init_seed=*/0);
    ck.load_into("", m.store);
    return m;
}

inline Discriminator load_discriminator(const Checkpoint& ck) {
    Discriminator d = build_discriminator(/*seed=*/0);
    ck.load_into("disc/", d.store);
    return d;
}

}  // namespace headsup::model
