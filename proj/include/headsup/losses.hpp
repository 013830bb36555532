#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "headsup/autodiff.hpp"
#include "headsup/geometry.hpp"
#include "headsup/identity.hpp"
#include "headsup/tensor.hpp"

namespace headsup::loss {

struct FaceLossWeights {
    double lambda_fid = 1.0;
    double lambda_lpips = 0.8;
    double lambda_id = 4.0;
    double lambda_adv = 0.05;

    void validate() const {
        if (lambda_fid < 0 || lambda_lpips < 0 || lambda_id < 0 || lambda_adv < 0)
            throw RangeError("FaceLossWeights: weights must be non-negative");
    }
};

struct ObjectiveWeights {
    double lambda_portrait = 1.0;
    double lambda_face = 1.0;
    double lambda_reg = 0.0;
    double lambda_lpips_portrait = 2.0;

    void validate() const {
        if (lambda_portrait < 0 || lambda_face < 0 || lambda_reg < 0 || lambda_lpips_portrait < 0)
            throw RangeError("ObjectiveWeights: weights must be non-negative");
    }
};

// Per-step named loss components. `total` must always equal the weighted
// recombination of the components (see recombine()).
struct LossReport {
    double total = 0;
    double portrait_mse = 0;
    double portrait_perceptual = 0;
    double face_fid = 0;
    double face_id = 0;
    double face_adv_g = 0;
    double face_adv_d = 0;
    double reg = 0;

    double recombine(const ObjectiveWeights& ow, const FaceLossWeights& fw) const {
        double portrait = portrait_mse + ow.lambda_lpips_portrait * portrait_perceptual;
        double face = fw.lambda_fid * face_fid + fw.lambda_id * face_id + fw.lambda_adv * face_adv_g;
        return ow.lambda_portrait * portrait + ow.lambda_face * face + ow.lambda_reg * reg;
    }

    bool all_finite() const {
        for (double v : {total, portrait_mse, portrait_perceptual, face_fid, face_id, face_adv_g,
                         face_adv_d, reg})
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// ---------------------------------------------------------------------------
// Perceptual distance: mean over 3 dyadic scales of (1 - SSIM), plus the mean
// absolute difference of the horizontal/vertical image gradients. Zero iff
// the images are identical, symmetric, differentiable.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> gaussian_kernel(int radius, double sigma) {
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double s = 0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-0.5 * i * i / (sigma * sigma));
        k[static_cast<size_t>(i + radius)] = v;
        s += v;
    }
    for (double& v : k) v /= s;
    return k;
}

// Mean SSIM map over the valid interior (window fully inside the image),
// 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1.
// Shrinks the window for tiny inputs.
inline ad::Var ssim_mean(const ad::Var& a, const ad::Var& b) {
    using namespace ad;
    const int h = a.value().dim(1), w = a.value().dim(2);
    int win = std::min({11, h, w});
    if (win % 2 == 0) --win;
    const int r = win / 2;
    const auto k = gaussian_kernel(r, 1.5);
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

    Var mu_a = separable_filter(a, k);
    Var mu_b = separable_filter(b, k);
    Var saa = sub(separable_filter(mul(a, a), k), mul(mu_a, mu_a));
    Var sbb = sub(separable_filter(mul(b, b), k), mul(mu_b, mu_b));
    Var sab = sub(separable_filter(mul(a, b), k), mul(mu_a, mu_b));

    Var num = mul(add(mul(mul(mu_a, mu_b), 2.0), c1), add(mul(sab, 2.0), c2));
    Var den = mul(add(add(mul(mu_a, mu_a), mul(mu_b, mu_b)), c1), add(add(saa, sbb), c2));
    Var map = div(num, den);
    const int vh = h - 2 * r, vw = w - 2 * r;
    if (vh > 0 && vw > 0) map = crop2d(map, r, r, vh, vw);
    return mean(map);
}

}  // namespace detail

inline ad::Var perceptual_distance(const ad::Var& a, const ad::Var& b) {
    using namespace ad;
    require_same_shape(a.value(), b.value(), "perceptual_distance");
    if (a.value().rank() != 3) throw ShapeError("perceptual_distance: expected rank-3 images");

    Var acc = Var::scalar_const(0.0);
    Var ca = a, cb = b;
    const int scales = 3;
    for (int s = 0; s < scales; ++s) {
        acc = add(acc, sub(1.0, detail::ssim_mean(ca, cb)));
        if (s + 1 < scales) {
            int nh = std::max(1, ca.value().dim(1) / 2);
            int nw = std::max(1, ca.value().dim(2) / 2);
            ca = adaptive_avg_pool2d(ca, nh, nw);
            cb = adaptive_avg_pool2d(cb, nh, nw);
        }
    }
    acc = div(acc, static_cast<double>(scales));

    Var gx = mean(abs(sub(diff_x(a), diff_x(b))));
    Var gy = mean(abs(sub(diff_y(a), diff_y(b))));
    return add(acc, mul(add(gx, gy), 0.5));
}

inline double perceptual_distance(const Tensor& a, const Tensor& b) {
    return perceptual_distance(ad::Var::constant(a), ad::Var::constant(b)).item();
}

// ---------------------------------------------------------------------------
// Face fidelity: MSE + lambda_lpips * perceptual, both on aligned crops. The
// L2 term is the mean of squared differences so weights stay resolution
// independent.
// ---------------------------------------------------------------------------

inline ad::Var mse_var(const ad::Var& a, const ad::Var& b) {
    require_same_shape(a.value(), b.value(), "mse");
    return ad::mean(ad::square(ad::sub(a, b)));
}

inline ad::Var face_fidelity(const ad::Var& gt_face, const ad::Var& pred_face,
                             const FaceLossWeights& w) {
    using namespace ad;
    Var out = mse_var(gt_face, pred_face);
    if (w.lambda_lpips > 0)
        out = add(out, mul(perceptual_distance(gt_face, pred_face), w.lambda_lpips));
    return out;
}

inline double face_fidelity(const Tensor& gt_face, const Tensor& pred_face,
                            const FaceLossWeights& w) {
    return face_fidelity(ad::Var::constant(gt_face), ad::Var::constant(pred_face), w).item();
}

// ---------------------------------------------------------------------------
// Reference-weighted identity loss:
//   -log((phi(pred,gt)+1)/2) - log((phi(pred,ref)+1)/2) * phi(gt,ref)
// with each log argument clamped to [1e-6, 1]. An absent reference
// contributes nothing (phi against absent is zero by definition), so the
// result is then exactly the GT term.
// ---------------------------------------------------------------------------

inline constexpr double kLogClampFloor = 1e-6;

inline ad::Var neg_log_half_score(const ad::Var& phi) {
    using namespace ad;
    return neg(log(clamp(div(add(phi, 1.0), 2.0), kLogClampFloor, 1.0)));
}

inline ad::Var identity_loss(const Tensor& gt_face, const ad::Var& pred_face,
                             const id::MaybeFace& ref, const id::Embedder& embedder) {
    using namespace ad;
    if (!embedder.differentiable())
        throw ContractViolation("identity_loss: embedder backend is inference-only");
    Var e_pred = embedder.embed_var(pred_face);
    Var e_gt = Var::constant(embedder.embed(gt_face).v);
    Var gt_term = neg_log_half_score(id::cosine_var(e_pred, e_gt));
    if (!ref.present()) return gt_term;

    Var e_ref = Var::constant(embedder.embed(ref.get()).v);
    double w = id::cosine(embedder.embed(gt_face), embedder.embed(ref.get()));
    Var ref_term = mul(neg_log_half_score(id::cosine_var(e_pred, e_ref)), w);
    return add(gt_term, ref_term);
}

inline double identity_loss(const Tensor& gt_face, const Tensor& pred_face,
                            const id::MaybeFace& ref, const id::Embedder& embedder) {
    return identity_loss(gt_face, ad::Var::constant(pred_face), ref, embedder).item();
}

// ---------------------------------------------------------------------------
// Non-saturating logistic GAN losses on (patch) logits.
//   g = mean softplus(-logit_fake)          (generator wants fakes real)
//   d = mean softplus(-logit_real) + mean softplus(logit_fake)
// ---------------------------------------------------------------------------

struct AdversarialLosses {
    ad::Var g_loss;
    ad::Var d_loss;
};

inline AdversarialLosses adversarial_losses(const ad::Var& logit_real, const ad::Var& logit_fake) {
    using namespace ad;
    AdversarialLosses out;
    out.g_loss = mean(softplus(neg(logit_fake)));
    out.d_loss = add(mean(softplus(neg(logit_real))), mean(softplus(logit_fake)));
    return out;
}

// ---------------------------------------------------------------------------
// Combined face loss and the full objective.
// ---------------------------------------------------------------------------

using DiscriminatorFn = std::function<ad::Var(const ad::Var& face)>;

struct FaceLossResult {
    ad::Var combined;  // lambda_fid * fid + lambda_id * id + lambda_adv * g
    double fid = 0, idv = 0, adv_g = 0, adv_d = 0;
};

inline FaceLossResult face_loss(const Tensor& gt_face, const ad::Var& pred_face,
                                const id::MaybeFace& ref, const DiscriminatorFn& disc,
                                const FaceLossWeights& w, const id::Embedder& embedder) {
    using namespace ad;
    w.validate();
    require_same_shape(gt_face, pred_face.value(), "face_loss");

    FaceLossResult out;
    out.combined = Var::scalar_const(0.0);
    Var gt_const = Var::constant(gt_face);

    if (w.lambda_fid > 0) {
        Var fid = face_fidelity(gt_const, pred_face, w);
        out.fid = fid.item();
        out.combined = add(out.combined, mul(fid, w.lambda_fid));
    }
    if (w.lambda_id > 0) {
        Var idl = identity_loss(gt_face, pred_face, ref, embedder);
        out.idv = idl.item();
        out.combined = add(out.combined, mul(idl, w.lambda_id));
    }
    if (w.lambda_adv > 0) {
        if (!disc) throw ContractViolation("face_loss: lambda_adv > 0 requires a discriminator");
        Var logit_fake = disc(pred_face);
        Var logit_real = disc(gt_const);
        auto adv = adversarial_losses(logit_real, logit_fake);
        out.adv_g = adv.g_loss.item();
        out.adv_d = adv.d_loss.item();
        out.combined = add(out.combined, mul(adv.g_loss, w.lambda_adv));
    }
    return out;
}

inline ad::Var portrait_loss(const ad::Var& x_h, const ad::Var& x_hat, double lambda_lpips,
                             double* out_mse = nullptr, double* out_perc = nullptr) {
    using namespace ad;
    require_same_shape(x_h.value(), x_hat.value(), "portrait_loss");
    Var m = mse_var(x_h, x_hat);
    if (out_mse) *out_mse = m.item();
    if (lambda_lpips <= 0) {
        if (out_perc) *out_perc = 0.0;
        return m;
    }
    Var p = perceptual_distance(x_h, x_hat);
    if (out_perc) *out_perc = p.item();
    return add(m, mul(p, lambda_lpips));
}

inline double portrait_loss(const Tensor& x_h, const Tensor& x_hat, double lambda_lpips = 2.0) {
    return portrait_loss(ad::Var::constant(x_h), ad::Var::constant(x_hat), lambda_lpips).item();
}

struct ObjectiveResult {
    ad::Var total;
    LossReport report;
};

// Eq-style decomposition: lambda_P * L_P(x_H, x_hat)
//   + lambda_F * L_F(align(x_H), align(x_hat), ref)
//   + lambda_reg * reg. Gradients flow into x_hat through both the portrait
// term and the differentiable alignment.
inline ObjectiveResult total_objective(const Tensor& x_h, const ad::Var& x_hat,
                                       const geo::Landmarks5& lm, const id::MaybeFace& ref,
                                       const DiscriminatorFn& disc, const ObjectiveWeights& ow,
                                       const FaceLossWeights& fw, const geo::FaceTemplate& tmpl,
                                       const id::Embedder& embedder,
                                       std::optional<ad::Var> reg_term = std::nullopt) {
    using namespace ad;
    ow.validate();
    fw.validate();
    require_same_shape(x_h, x_hat.value(), "total_objective");

    ObjectiveResult out;
    out.total = Var::scalar_const(0.0);

    if (ow.lambda_portrait > 0) {
        Var lp = portrait_loss(Var::constant(x_h), x_hat, ow.lambda_lpips_portrait,
                               &out.report.portrait_mse, &out.report.portrait_perceptual);
        out.total = add(out.total, mul(lp, ow.lambda_portrait));
    }
    if (ow.lambda_face > 0) {
        Tensor gt_face = geo::align_face(x_h, lm, tmpl);
        Var pred_face = geo::align_face(x_hat, lm, tmpl);
        FaceLossResult fl = face_loss(gt_face, pred_face, ref, disc, fw, embedder);
        out.report.face_fid = fl.fid;
        out.report.face_id = fl.idv;
        out.report.face_adv_g = fl.adv_g;
        out.report.face_adv_d = fl.adv_d;
        out.total = add(out.total, mul(fl.combined, ow.lambda_face));
    }
    if (ow.lambda_reg > 0 && reg_term.has_value()) {
        out.report.reg = reg_term->item();
        out.total = add(out.total, mul(*reg_term, ow.lambda_reg));
    }
    out.report.total = out.total.item();
    return out;
}

}  // namespace headsup::loss
