#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "headsup/tensor.hpp"

namespace headsup::img {

// ---------------------------------------------------------------------------
// PNG I/O. Images live on disk as 8-bit RGB PNGs; in memory they are (3,H,W)
// doubles in [0,1].
// ---------------------------------------------------------------------------

inline Tensor load_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("load_png: cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("load_png: libpng init failed");
    }
    std::vector<png_bytep> rows;
    std::vector<png_byte> buf;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("load_png: failed to decode " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    // Normalize everything to 8-bit RGB.
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    size_t rowbytes = png_get_rowbytes(png, info);
    buf.resize(rowbytes * h);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    Tensor out({3, static_cast<int>(h), static_cast<int>(w)});
    for (png_uint_32 y = 0; y < h; ++y) {
        const png_byte* row = rows[y];
        for (png_uint_32 x = 0; x < w; ++x) {
            out.at(0, static_cast<int>(y), static_cast<int>(x)) = row[3 * x + 0] / 255.0;
            out.at(1, static_cast<int>(y), static_cast<int>(x)) = row[3 * x + 1] / 255.0;
            out.at(2, static_cast<int>(y), static_cast<int>(x)) = row[3 * x + 2] / 255.0;
        }
    }
    return out;
}

inline void save_png(const Tensor& t, const std::string& path) {
    require_image(t, "save_png");
    const int h = t.dim(1), w = t.dim(2);

    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("save_png: cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("save_png: libpng init failed");
    }
    std::vector<png_byte> buf(static_cast<size_t>(h) * w * 3);
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("save_png: failed to encode " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);

    for (int y = 0; y < h; ++y) {
        rows[static_cast<size_t>(y)] = buf.data() + static_cast<size_t>(y) * w * 3;
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = std::clamp(t.at(c, y, x), 0.0, 1.0);
                buf[(static_cast<size_t>(y) * w + x) * 3 + c] =
                    static_cast<png_byte>(std::lround(v * 255.0));
            }
    }
    png_set_rows(png, info, rows.data());
    png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

// ---------------------------------------------------------------------------
// Resampling. All modes clamp sample coordinates to the image border and use
// the half-pixel-center convention (src = (dst + 0.5) * scale - 0.5).
// ---------------------------------------------------------------------------

enum class Resample { kNearest, kBilinear, kBicubic, kArea };

inline const char* resample_name(Resample m) {
    switch (m) {
        case Resample::kNearest: return "nearest";
        case Resample::kBilinear: return "bilinear";
        case Resample::kBicubic: return "bicubic";
        case Resample::kArea: return "area";
    }
    return "?";
}

namespace detail {

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

// Catmull-Rom kernel (a = -0.5), the common bicubic choice.
inline double cubic_weight(double x) {
    const double a = -0.5;
    x = std::abs(x);
    if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
    return 0.0;
}

}  // namespace detail

inline Tensor resize(const Tensor& src, int oh, int ow, Resample mode) {
    if (src.rank() != 3) throw ShapeError("resize: expected rank-3 tensor");
    if (oh < 1 || ow < 1) throw ShapeError("resize: non-positive output size");
    const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
    Tensor out({c, oh, ow});
    const double sy = static_cast<double>(h) / oh;
    const double sx = static_cast<double>(w) / ow;

    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x) {
                double v = 0.0;
                switch (mode) {
                    case Resample::kNearest: {
                        int ys = detail::clampi(static_cast<int>(std::floor((y + 0.5) * sy)), 0, h - 1);
                        int xs = detail::clampi(static_cast<int>(std::floor((x + 0.5) * sx)), 0, w - 1);
                        v = src.at(ch, ys, xs);
                        break;
                    }
                    case Resample::kBilinear: {
                        double fy = (y + 0.5) * sy - 0.5;
                        double fx = (x + 0.5) * sx - 0.5;
                        int y0 = static_cast<int>(std::floor(fy));
                        int x0 = static_cast<int>(std::floor(fx));
                        double wy = fy - y0, wx = fx - x0;
                        int y0c = detail::clampi(y0, 0, h - 1), y1c = detail::clampi(y0 + 1, 0, h - 1);
                        int x0c = detail::clampi(x0, 0, w - 1), x1c = detail::clampi(x0 + 1, 0, w - 1);
                        v = (1 - wy) * ((1 - wx) * src.at(ch, y0c, x0c) + wx * src.at(ch, y0c, x1c)) +
                            wy * ((1 - wx) * src.at(ch, y1c, x0c) + wx * src.at(ch, y1c, x1c));
                        break;
                    }
                    case Resample::kBicubic: {
                        double fy = (y + 0.5) * sy - 0.5;
                        double fx = (x + 0.5) * sx - 0.5;
                        int y0 = static_cast<int>(std::floor(fy));
                        int x0 = static_cast<int>(std::floor(fx));
                        double acc = 0.0, wsum = 0.0;
                        for (int j = -1; j <= 2; ++j) {
                            double wyj = detail::cubic_weight(fy - (y0 + j));
                            for (int i = -1; i <= 2; ++i) {
                                double wxi = detail::cubic_weight(fx - (x0 + i));
                                double wgt = wyj * wxi;
                                acc += wgt * src.at(ch, detail::clampi(y0 + j, 0, h - 1),
                                                    detail::clampi(x0 + i, 0, w - 1));
                                wsum += wgt;
                            }
                        }
                        v = acc / wsum;
                        break;
                    }
                    case Resample::kArea: {
                        double ys0 = y * sy, ys1 = (y + 1) * sy;
                        double xs0 = x * sx, xs1 = (x + 1) * sx;
                        int iy0 = static_cast<int>(std::floor(ys0));
                        int iy1 = std::min(h, static_cast<int>(std::ceil(ys1)));
                        int ix0 = static_cast<int>(std::floor(xs0));
                        int ix1 = std::min(w, static_cast<int>(std::ceil(xs1)));
                        double acc = 0.0, area = 0.0;
                        for (int yy = iy0; yy < iy1; ++yy) {
                            double cy = std::min<double>(yy + 1, ys1) - std::max<double>(yy, ys0);
                            for (int xx = ix0; xx < ix1; ++xx) {
                                double cx = std::min<double>(xx + 1, xs1) - std::max<double>(xx, xs0);
                                acc += cy * cx * src.at(ch, yy, xx);
                                area += cy * cx;
                            }
                        }
                        v = acc / area;
                        break;
                    }
                }
                out.at(ch, y, x) = v;
            }
        }
    }
    return out;
}

// Gaussian blur, separable, clamp-to-edge. sigma <= 0 is the identity.
inline Tensor gaussian_blur(const Tensor& src, double sigma) {
    if (src.rank() != 3) throw ShapeError("gaussian_blur: expected rank-3 tensor");
    if (sigma <= 0.0) return src;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double s = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[static_cast<size_t>(i + radius)] = v;
        s += v;
    }
    for (double& v : k) v /= s;

    const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
    Tensor tmp({c, h, w}), out({c, h, w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[static_cast<size_t>(i + radius)] *
                           src.at(ch, y, detail::clampi(x + i, 0, w - 1));
                tmp.at(ch, y, x) = acc;
            }
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[static_cast<size_t>(i + radius)] *
                           tmp.at(ch, detail::clampi(y + i, 0, h - 1), x);
                out.at(ch, y, x) = acc;
            }
    return out;
}

// Rec.601 luma.
inline Tensor to_gray(const Tensor& rgb) {
    require_image(rgb, "to_gray");
    const int h = rgb.dim(1), w = rgb.dim(2);
    Tensor g({1, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            g.at(0, y, x) =
                0.299 * rgb.at(0, y, x) + 0.587 * rgb.at(1, y, x) + 0.114 * rgb.at(2, y, x);
    return g;
}

inline Tensor clamp01(Tensor t) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = std::clamp(t[i], 0.0, 1.0);
    return t;
}

}  // namespace headsup::img
