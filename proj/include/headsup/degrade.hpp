#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "headsup/image.hpp"
#include "headsup/rng.hpp"
#include "headsup/tensor.hpp"

namespace headsup::deg {

struct DegradeConfig {
    std::array<double, 2> blur_sigma_range{0.4, 2.0};
    int downscale_factor = 4;
    std::array<double, 2> noise_sigma_range{0.0, 0.06};
    std::array<int, 2> jpeg_quality_range{35, 90};
    bool second_order = false;
    std::vector<img::Resample> resample_modes{img::Resample::kNearest, img::Resample::kBilinear,
                                              img::Resample::kBicubic, img::Resample::kArea};

    void validate() const {
        if (blur_sigma_range[0] > blur_sigma_range[1] || blur_sigma_range[0] < 0.0)
            throw RangeError("DegradeConfig: bad blur_sigma_range");
        if (noise_sigma_range[0] > noise_sigma_range[1] || noise_sigma_range[0] < 0.0)
            throw RangeError("DegradeConfig: bad noise_sigma_range");
        if (jpeg_quality_range[0] > jpeg_quality_range[1] || jpeg_quality_range[0] < 10 ||
            jpeg_quality_range[1] > 95)
            throw RangeError("DegradeConfig: jpeg quality must be in [10, 95]");
        if (downscale_factor < 1) throw RangeError("DegradeConfig: factor must be >= 1");
        if (resample_modes.empty()) throw RangeError("DegradeConfig: no resample modes");
    }
};

namespace detail {

// JPEG Annex K luminance quantization table.
inline const std::array<int, 64>& jpeg_luma_table() {
    static const std::array<int, 64> t = {
        16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
        14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
        18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
        49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
    return t;
}

// libjpeg-style quality scaling of the base table.
inline std::array<double, 64> scaled_quant_table(int quality) {
    int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    std::array<double, 64> q;
    for (int i = 0; i < 64; ++i) {
        int v = (jpeg_luma_table()[static_cast<size_t>(i)] * scale + 50) / 100;
        q[static_cast<size_t>(i)] = static_cast<double>(std::clamp(v, 1, 255));
    }
    return q;
}

// Orthonormal 8x8 DCT-II basis.
inline const std::array<double, 64>& dct_basis() {
    static const std::array<double, 64> c = [] {
        std::array<double, 64> b{};
        for (int k = 0; k < 8; ++k) {
            double a = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
            for (int n = 0; n < 8; ++n)
                b[static_cast<size_t>(k * 8 + n)] =
                    a * std::cos(M_PI * (2 * n + 1) * k / 16.0);
        }
        return b;
    }();
    return c;
}

// Block-DCT quantization, per channel, no chroma subsampling. Pixels outside
// an 8-multiple boundary are edge-replicated for the transform and cropped
// afterwards.
inline Tensor jpeg_quantize(const Tensor& src, int quality) {
    const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
    const int hp = (h + 7) / 8 * 8, wp = (w + 7) / 8 * 8;
    const auto q = scaled_quant_table(quality);
    const auto& B = dct_basis();

    Tensor out({c, h, w});
    double block[64], tmp[64], coef[64];
    for (int ch = 0; ch < c; ++ch)
        for (int by = 0; by < hp; by += 8)
            for (int bx = 0; bx < wp; bx += 8) {
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x) {
                        int sy = std::min(by + y, h - 1), sx = std::min(bx + x, w - 1);
                        block[y * 8 + x] = src.at(ch, sy, sx) * 255.0 - 128.0;
                    }
                // coef = B * block * B^T
                for (int i = 0; i < 8; ++i)
                    for (int j = 0; j < 8; ++j) {
                        double acc = 0;
                        for (int k = 0; k < 8; ++k) acc += B[static_cast<size_t>(i * 8 + k)] * block[k * 8 + j];
                        tmp[i * 8 + j] = acc;
                    }
                for (int i = 0; i < 8; ++i)
                    for (int j = 0; j < 8; ++j) {
                        double acc = 0;
                        for (int k = 0; k < 8; ++k) acc += tmp[i * 8 + k] * B[static_cast<size_t>(j * 8 + k)];
                        coef[i * 8 + j] = acc;
                    }
                for (int i = 0; i < 64; ++i)
                    coef[i] = std::round(coef[i] / q[static_cast<size_t>(i)]) * q[static_cast<size_t>(i)];
                // block = B^T * coef * B
                for (int i = 0; i < 8; ++i)
                    for (int j = 0; j < 8; ++j) {
                        double acc = 0;
                        for (int k = 0; k < 8; ++k) acc += B[static_cast<size_t>(k * 8 + i)] * coef[k * 8 + j];
                        tmp[i * 8 + j] = acc;
                    }
                for (int i = 0; i < 8; ++i)
                    for (int j = 0; j < 8; ++j) {
                        double acc = 0;
                        for (int k = 0; k < 8; ++k) acc += tmp[i * 8 + k] * B[static_cast<size_t>(k * 8 + j)];
                        block[i * 8 + j] = acc;
                    }
                for (int y = 0; y < 8 && by + y < h; ++y)
                    for (int x = 0; x < 8 && bx + x < w; ++x)
                        out.at(ch, by + y, bx + x) =
                            std::clamp((block[y * 8 + x] + 128.0) / 255.0, 0.0, 1.0);
            }
    return out;
}

// One blur -> downsample -> noise -> jpeg pass. Stage randomness comes from
// streams keyed by (seed, stage_base + stage index), so adding a stage never
// perturbs the draws of another.
inline Tensor degrade_pass(const Tensor& x, const DegradeConfig& cfg, uint64_t seed,
                           int stage_base, int factor) {
    Tensor cur = x;

    double sigma = Rng(seed, static_cast<uint64_t>(stage_base + 0))
                       .uniform(cfg.blur_sigma_range[0], cfg.blur_sigma_range[1]);
    if (sigma > 1e-12) cur = img::gaussian_blur(cur, sigma);

    if (factor > 1) {
        Rng r(seed, static_cast<uint64_t>(stage_base + 1));
        auto mode = cfg.resample_modes[static_cast<size_t>(
            r.uniform_int(0, static_cast<int64_t>(cfg.resample_modes.size()) - 1))];
        cur = img::resize(cur, cur.dim(1) / factor, cur.dim(2) / factor, mode);
    }

    double nsigma = Rng(seed, static_cast<uint64_t>(stage_base + 2))
                        .uniform(cfg.noise_sigma_range[0], cfg.noise_sigma_range[1]);
    nsigma = std::clamp(nsigma, 0.0, 1.0);
    if (nsigma > 1e-12) {
        Rng r(seed, static_cast<uint64_t>(stage_base + 3));
        for (int64_t i = 0; i < cur.numel(); ++i)
            cur[i] = std::clamp(cur[i] + nsigma * r.normal(), 0.0, 1.0);
    }

    int lo = cfg.jpeg_quality_range[0], hi = cfg.jpeg_quality_range[1];
    if (stage_base > 0) {
        // Second pass is milder: the quality deficit from 95 is halved.
        lo = 95 - (95 - lo) / 2;
        hi = 95 - (95 - hi) / 2;
    }
    int quality = static_cast<int>(
        Rng(seed, static_cast<uint64_t>(stage_base + 4)).uniform_int(lo, hi));
    cur = jpeg_quantize(cur, quality);
    return cur;
}

}  // namespace detail

// The degradation function Phi. Deterministic in (hq, cfg, seed); output is
// hq size / downscale_factor, values in [0, 1].
inline Tensor degrade(const Tensor& hq, const DegradeConfig& cfg, uint64_t seed) {
    require_image(hq, "degrade");
    cfg.validate();
    if (hq.dim(1) % cfg.downscale_factor != 0 || hq.dim(2) % cfg.downscale_factor != 0)
        throw ShapeError("degrade: image size not divisible by downscale factor");

    Tensor lq = detail::degrade_pass(hq, cfg, seed, 0, cfg.downscale_factor);
    if (cfg.second_order) {
        DegradeConfig second = cfg;
        second.blur_sigma_range = {cfg.blur_sigma_range[0] * 0.5, cfg.blur_sigma_range[1] * 0.5};
        second.noise_sigma_range = {cfg.noise_sigma_range[0] * 0.5,
                                    cfg.noise_sigma_range[1] * 0.5};
        // Sizes are already final; the second pass never resamples.
        lq = detail::degrade_pass(lq, second, seed, 8, 1);
    }
    return lq;
}

}  // namespace headsup::deg
