#include <catch2/catch_amalgamated.hpp>

#include "headsup/degrade.hpp"
#include "headsup/rng.hpp"
#include "support/gradcheck.hpp"

using namespace headsup;
using namespace headsup::deg;

namespace {

// Smooth test image so resampling differences stay small.
Tensor smooth_image(int h, int w, uint64_t seed) {
    Rng rng(seed);
    double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0), ph = rng.uniform(0, 6.28);
    Tensor t({3, h, w});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                t.at(c, y, x) = 0.5 + 0.4 * std::sin(fx * 6.28 * x / w + ph + c) *
                                          std::cos(fy * 6.28 * y / h);
    return t;
}

}  // namespace

TEST_CASE("degrade: near-identity config equals plain bicubic downsample") {
    Tensor hq = smooth_image(64, 64, 1);
    DegradeConfig cfg;
    cfg.blur_sigma_range = {0.0, 0.0};
    cfg.noise_sigma_range = {0.0, 0.0};
    cfg.jpeg_quality_range = {95, 95};
    cfg.downscale_factor = 4;
    cfg.second_order = false;
    cfg.resample_modes = {img::Resample::kBicubic};

    Tensor lq = degrade(hq, cfg, 7);
    Tensor ref = img::resize(hq, 16, 16, img::Resample::kBicubic);
    REQUIRE(lq.shape() == std::vector<int>{3, 16, 16});
    REQUIRE(mean_abs_diff(lq, ref) < 0.01);
}

TEST_CASE("degrade: deterministic in (hq, cfg, seed)") {
    Tensor hq = smooth_image(32, 32, 2);
    DegradeConfig cfg;
    cfg.second_order = true;
    Tensor a = degrade(hq, cfg, 123);
    Tensor b = degrade(hq, cfg, 123);
    REQUIRE(max_abs_diff(a, b) == 0.0);

    Tensor c = degrade(hq, cfg, 124);
    REQUIRE(max_abs_diff(a, c) > 0.0);
}

TEST_CASE("degrade: noise-only config reproduces the target standard deviation") {
    // factor 1 and a 320x320 constant input -> >= 1e5 pixels per channel.
    Tensor hq({3, 320, 320}, 0.5);
    DegradeConfig cfg;
    cfg.blur_sigma_range = {0.0, 0.0};
    cfg.noise_sigma_range = {0.1, 0.1};
    cfg.jpeg_quality_range = {95, 95};
    cfg.downscale_factor = 1;

    Tensor lq = degrade(hq, cfg, 99);
    double mean = lq.mean();
    double var = 0.0;
    for (int64_t i = 0; i < lq.numel(); ++i) {
        double d = lq[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(lq.numel());
    double sd = std::sqrt(var);
    REQUIRE(sd > 0.095);
    REQUIRE(sd < 0.105);
}

TEST_CASE("degrade: output always within [0,1]") {
    Tensor hq = smooth_image(32, 32, 3);
    DegradeConfig cfg;
    cfg.noise_sigma_range = {0.3, 0.3};
    cfg.jpeg_quality_range = {10, 20};
    cfg.second_order = true;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Tensor lq = degrade(hq, cfg, seed);
        REQUIRE(lq.min() >= 0.0);
        REQUIRE(lq.max() <= 1.0);
    }
}

TEST_CASE("degrade: rejects size not divisible by factor") {
    Tensor hq({3, 30, 30}, 0.5);
    DegradeConfig cfg;
    cfg.downscale_factor = 4;
    REQUIRE_THROWS_AS(degrade(hq, cfg, 0), ShapeError);
}

TEST_CASE("degrade: invalid configs rejected") {
    DegradeConfig cfg;
    cfg.jpeg_quality_range = {5, 90};
    REQUIRE_THROWS_AS(cfg.validate(), RangeError);
    cfg = DegradeConfig{};
    cfg.blur_sigma_range = {2.0, 1.0};
    REQUIRE_THROWS_AS(cfg.validate(), RangeError);
    cfg = DegradeConfig{};
    cfg.downscale_factor = 0;
    REQUIRE_THROWS_AS(cfg.validate(), RangeError);
}

TEST_CASE("degrade: second-order pass is milder than doubling the first") {
    // The second pass must still produce a valid image of unchanged size.
    Tensor hq = smooth_image(64, 64, 4);
    DegradeConfig cfg;
    cfg.second_order = true;
    Tensor lq = degrade(hq, cfg, 11);
    REQUIRE(lq.shape() == std::vector<int>{3, 16, 16});
    REQUIRE(lq.all_finite());
}

TEST_CASE("jpeg quantization: quality 10 is visibly lossier than 95") {
    Tensor x = smooth_image(32, 32, 5);
    Tensor q95 = deg::detail::jpeg_quantize(x, 95);
    Tensor q10 = deg::detail::jpeg_quantize(x, 10);
    REQUIRE(mse(x, q95) < mse(x, q10));
    REQUIRE(mse(x, q95) < 1e-4);
}
