#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "headsup/autodiff.hpp"
#include "headsup/tensor.hpp"

namespace headsup::geo {

// Five facial landmarks in pixel coordinates, ordered: left eye, right eye,
// nose tip, left mouth corner, right mouth corner.
struct Landmarks5 {
    std::array<std::array<double, 2>, 5> pts{};

    static constexpr double kDegenerateVar = 1e-12;

    double centered_variance() const {
        double cx = 0, cy = 0;
        for (const auto& p : pts) {
            cx += p[0];
            cy += p[1];
        }
        cx /= 5.0;
        cy /= 5.0;
        double var = 0;
        for (const auto& p : pts) {
            double dx = p[0] - cx, dy = p[1] - cy;
            var += dx * dx + dy * dy;
        }
        return var / 5.0;
    }

    void validate() const {
        for (const auto& p : pts)
            if (!std::isfinite(p[0]) || !std::isfinite(p[1]))
                throw DegenerateLandmarks("Landmarks5: non-finite coordinate");
        if (centered_variance() <= kDegenerateVar)
            throw DegenerateLandmarks("Landmarks5: coincident points");
    }

    std::vector<double> flat() const {
        std::vector<double> v;
        v.reserve(10);
        for (const auto& p : pts) {
            v.push_back(p[0]);
            v.push_back(p[1]);
        }
        return v;
    }

    static Landmarks5 from_flat(const std::vector<double>& v) {
        if (v.size() != 10) throw ShapeError("Landmarks5: expected 10 values");
        Landmarks5 lm;
        for (int i = 0; i < 5; ++i) lm.pts[static_cast<size_t>(i)] = {v[2 * i], v[2 * i + 1]};
        return lm;
    }

    double eye_distance() const {
        double dx = pts[1][0] - pts[0][0], dy = pts[1][1] - pts[0][1];
        return std::sqrt(dx * dx + dy * dy);
    }
};

// 4-DOF similarity transform, stored row-major as [[a, -b, tx], [b, a, ty]]
// with a = s cos(theta), b = s sin(theta), s > 0.
struct SimilarityTransform {
    std::array<double, 6> m{1, 0, 0, 0, 1, 0};

    double a() const { return m[0]; }
    double b() const { return m[3]; }
    double tx() const { return m[2]; }
    double ty() const { return m[5]; }
    double scale() const { return std::sqrt(a() * a() + b() * b()); }
    double theta() const { return std::atan2(b(), a()); }

    static SimilarityTransform identity() { return {}; }

    static SimilarityTransform from_params(double s, double theta, double tx, double ty) {
        SimilarityTransform t;
        double a = s * std::cos(theta), b = s * std::sin(theta);
        t.m = {a, -b, tx, b, a, ty};
        return t;
    }

    std::array<double, 2> apply(double x, double y) const {
        return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
    }

    Landmarks5 apply(const Landmarks5& lm) const {
        Landmarks5 out;
        for (size_t i = 0; i < 5; ++i) {
            auto p = apply(lm.pts[i][0], lm.pts[i][1]);
            out.pts[i] = {p[0], p[1]};
        }
        return out;
    }

    void validate() const {
        if (std::abs(m[0] - m[4]) > 1e-9 || std::abs(m[1] + m[3]) > 1e-9)
            throw ContractViolation("SimilarityTransform: not a similarity matrix");
        if (scale() <= 0.0) throw ContractViolation("SimilarityTransform: non-positive scale");
    }
};

// 5-point face template. Default coordinates are the widely used ArcFace
// 112x112 layout, rescaled linearly to the requested side.
struct FaceTemplate {
    Landmarks5 points;
    int side = 0;

    static FaceTemplate arcface(int side) {
        static constexpr std::array<std::array<double, 2>, 5> kBase = {{{38.2946, 51.6963},
                                                                        {73.5318, 51.5014},
                                                                        {56.0252, 71.7366},
                                                                        {41.5493, 92.3655},
                                                                        {70.7299, 92.2041}}};
        FaceTemplate t;
        t.side = side;
        const double k = static_cast<double>(side) / 112.0;
        for (size_t i = 0; i < 5; ++i) t.points.pts[i] = {kBase[i][0] * k, kBase[i][1] * k};
        t.validate();
        return t;
    }

    void validate() const {
        if (side < 2) throw ContractViolation("FaceTemplate: side too small");
        for (const auto& p : points.pts)
            if (p[0] < 0 || p[0] >= side || p[1] < 0 || p[1] >= side)
                throw ContractViolation("FaceTemplate: point outside [0, side)^2");
        if (!(points.pts[0][0] < points.pts[1][0]))
            throw ContractViolation("FaceTemplate: eyes out of order");
    }
};

// Least-squares 4-DOF similarity mapping src onto dst (Umeyama closed form
// restricted to scale+rotation+translation). After centering, the normal
// equations decouple into a = <s,d>/|s|^2 and b = (s x d)/|s|^2.
inline SimilarityTransform estimate_similarity(const Landmarks5& src, const Landmarks5& dst) {
    src.validate();
    dst.validate();

    double scx = 0, scy = 0, dcx = 0, dcy = 0;
    for (size_t i = 0; i < 5; ++i) {
        scx += src.pts[i][0];
        scy += src.pts[i][1];
        dcx += dst.pts[i][0];
        dcy += dst.pts[i][1];
    }
    scx /= 5.0;
    scy /= 5.0;
    dcx /= 5.0;
    dcy /= 5.0;

    double dot = 0, cross = 0, norm = 0;
    for (size_t i = 0; i < 5; ++i) {
        double sx = src.pts[i][0] - scx, sy = src.pts[i][1] - scy;
        double dx = dst.pts[i][0] - dcx, dy = dst.pts[i][1] - dcy;
        dot += sx * dx + sy * dy;
        cross += sx * dy - sy * dx;
        norm += sx * sx + sy * sy;
    }
    if (norm <= Landmarks5::kDegenerateVar)
        throw DegenerateLandmarks("estimate_similarity: degenerate source landmarks");

    const double a = dot / norm;
    const double b = cross / norm;
    if (a * a + b * b <= 1e-24)
        throw DegenerateLandmarks("estimate_similarity: zero-scale solution");

    SimilarityTransform t;
    t.m[0] = a;
    t.m[1] = -b;
    t.m[3] = b;
    t.m[4] = a;
    t.m[2] = dcx - (a * scx - b * scy);
    t.m[5] = dcy - (b * scx + a * scy);
    return t;
}

inline SimilarityTransform invert_transform(const SimilarityTransform& t) {
    const double a = t.a(), b = t.b();
    const double s2 = a * a + b * b;
    const double ia = a / s2, ib = -b / s2;
    SimilarityTransform inv;
    inv.m[0] = ia;
    inv.m[1] = -ib;
    inv.m[3] = ib;
    inv.m[4] = ia;
    inv.m[2] = -(ia * t.tx() - ib * t.ty());
    inv.m[5] = -(ib * t.tx() + ia * t.ty());
    return inv;
}

// Bilinear warp: t maps output pixel coordinates into source pixel
// coordinates; samples outside the source clamp to the border.
inline ad::Var warp_bilinear(const ad::Var& img, const SimilarityTransform& t, int out_h,
                             int out_w) {
    if (img.value().rank() != 3 || img.value().dim(0) != 3)
        throw ShapeError("warp_bilinear: expected (3,H,W) image");
    return ad::warp_bilinear_m(img, t.m, out_h, out_w);
}

inline Tensor warp_bilinear(const Tensor& img, const SimilarityTransform& t, int out_h,
                            int out_w) {
    return warp_bilinear(ad::Var::constant(img), t, out_h, out_w).value();
}

// Differentiable variant in the transform parameters as well: params is a
// 6-element Var laid out like SimilarityTransform::m.
inline ad::Var warp_bilinear_params(const ad::Var& img, const ad::Var& params, int out_h,
                                    int out_w) {
    if (img.value().rank() != 3 || img.value().dim(0) != 3)
        throw ShapeError("warp_bilinear: expected (3,H,W) image");
    std::array<double, 6> m;
    for (int i = 0; i < 6; ++i) m[static_cast<size_t>(i)] = params.value()[i];
    return ad::warp_bilinear_m(img, m, out_h, out_w, params);
}

// The alignment projection: estimate the landmark->template similarity, then
// resample the portrait onto the template grid. Differentiable w.r.t. the
// portrait pixels.
inline ad::Var align_face(const ad::Var& portrait, const Landmarks5& lm,
                          const FaceTemplate& tmpl) {
    SimilarityTransform t = estimate_similarity(lm, tmpl.points);
    return warp_bilinear(portrait, invert_transform(t), tmpl.side, tmpl.side);
}

inline Tensor align_face(const Tensor& portrait, const Landmarks5& lm, const FaceTemplate& tmpl) {
    return align_face(ad::Var::constant(portrait), lm, tmpl).value();
}

}  // namespace headsup::geo
