#include <catch2/catch_amalgamated.hpp>

#include "headsup/geometry.hpp"
#include "headsup/rng.hpp"
#include "support/gradcheck.hpp"

using namespace headsup;
using namespace headsup::geo;
using headsup::ad::Var;

namespace {

Landmarks5 random_landmarks(Rng& rng, double lo = 10.0, double hi = 100.0) {
    Landmarks5 lm;
    for (auto& p : lm.pts) p = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
    return lm;
}

// Independent oracle: solve the full 4-parameter normal equations
// min sum || [a -b; b a] p + t - q ||^2 over (a, b, tx, ty) by Gaussian
// elimination, without the centering shortcut used by the implementation.
std::array<double, 4> brute_force_similarity(const Landmarks5& src, const Landmarks5& dst) {
    double A[4][4] = {};
    double rhs[4] = {};
    for (size_t i = 0; i < 5; ++i) {
        double x = src.pts[i][0], y = src.pts[i][1];
        double u = dst.pts[i][0], v = dst.pts[i][1];
        // Residual rows: [x, -y, 1, 0] . [a b tx ty] = u ; [y, x, 0, 1] . = v
        double r1[4] = {x, -y, 1, 0};
        double r2[4] = {y, x, 0, 1};
        for (int j = 0; j < 4; ++j)
            for (int k = 0; k < 4; ++k) A[j][k] += r1[j] * r1[k] + r2[j] * r2[k];
        for (int j = 0; j < 4; ++j) rhs[j] += r1[j] * u + r2[j] * v;
    }
    // Gaussian elimination with partial pivoting.
    int idx[4] = {0, 1, 2, 3};
    for (int col = 0; col < 4; ++col) {
        int piv = col;
        for (int r = col + 1; r < 4; ++r)
            if (std::abs(A[idx[r]][col]) > std::abs(A[idx[piv]][col])) piv = r;
        std::swap(idx[col], idx[piv]);
        for (int r = col + 1; r < 4; ++r) {
            double f = A[idx[r]][col] / A[idx[col]][col];
            for (int k = col; k < 4; ++k) A[idx[r]][k] -= f * A[idx[col]][k];
            rhs[idx[r]] -= f * rhs[idx[col]];
        }
    }
    std::array<double, 4> sol{};
    for (int r = 3; r >= 0; --r) {
        double acc = rhs[idx[r]];
        for (int k = r + 1; k < 4; ++k) acc -= A[idx[r]][k] * sol[static_cast<size_t>(k)];
        sol[static_cast<size_t>(r)] = acc / A[idx[r]][r];
    }
    return sol;  // (a, b, tx, ty)
}

}  // namespace

TEST_CASE("estimate_similarity: identity on template points") {
    FaceTemplate tmpl = FaceTemplate::arcface(128);
    SimilarityTransform t = estimate_similarity(tmpl.points, tmpl.points);
    REQUIRE(std::abs(t.scale() - 1.0) < 1e-9);
    REQUIRE(std::abs(t.theta()) < 1e-9);
    REQUIRE(std::abs(t.tx()) < 1e-9);
    REQUIRE(std::abs(t.ty()) < 1e-9);
}

TEST_CASE("estimate_similarity: recovers a constructed transform") {
    FaceTemplate tmpl = FaceTemplate::arcface(128);
    // src = template scaled by 2 then shifted by (10, 20); mapping src->template
    // must invert that exactly.
    Landmarks5 src;
    for (size_t i = 0; i < 5; ++i)
        src.pts[i] = {tmpl.points.pts[i][0] * 2.0 + 10.0, tmpl.points.pts[i][1] * 2.0 + 20.0};
    SimilarityTransform t = estimate_similarity(src, tmpl.points);
    for (size_t i = 0; i < 5; ++i) {
        auto p = t.apply(src.pts[i][0], src.pts[i][1]);
        REQUIRE(std::abs(p[0] - tmpl.points.pts[i][0]) < 1e-9);
        REQUIRE(std::abs(p[1] - tmpl.points.pts[i][1]) < 1e-9);
    }
}

TEST_CASE("estimate_similarity: matches brute-force normal equations") {
    Rng rng(1234);
    for (int trial = 0; trial < 50; ++trial) {
        Landmarks5 src = random_landmarks(rng);
        Landmarks5 dst = random_landmarks(rng);
        SimilarityTransform t = estimate_similarity(src, dst);
        auto bf = brute_force_similarity(src, dst);
        REQUIRE(std::abs(t.a() - bf[0]) < 1e-8);
        REQUIRE(std::abs(t.b() - bf[1]) < 1e-8);
        REQUIRE(std::abs(t.tx() - bf[2]) < 1e-8);
        REQUIRE(std::abs(t.ty() - bf[3]) < 1e-8);
        t.validate();  // matrix form invariant holds after estimation
    }
}

TEST_CASE("estimate_similarity: exact on noise-free similarity-related sets") {
    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        Landmarks5 src = random_landmarks(rng);
        auto gt = SimilarityTransform::from_params(rng.uniform(0.3, 3.0),
                                                   rng.uniform(-3.0, 3.0),
                                                   rng.uniform(-50.0, 50.0),
                                                   rng.uniform(-50.0, 50.0));
        Landmarks5 dst = gt.apply(src);
        SimilarityTransform t = estimate_similarity(src, dst);
        for (int i = 0; i < 6; ++i)
            REQUIRE(std::abs(t.m[static_cast<size_t>(i)] - gt.m[static_cast<size_t>(i)]) < 1e-9);
    }
}

TEST_CASE("estimate_similarity: degenerate source rejected") {
    Landmarks5 src;
    for (auto& p : src.pts) p = {5.0, 5.0};
    FaceTemplate tmpl = FaceTemplate::arcface(64);
    REQUIRE_THROWS_AS(estimate_similarity(src, tmpl.points), DegenerateLandmarks);
}

TEST_CASE("invert_transform") {
    SECTION("identity") {
        auto inv = invert_transform(SimilarityTransform::identity());
        for (int i = 0; i < 6; ++i)
            REQUIRE(std::abs(inv.m[static_cast<size_t>(i)] -
                             SimilarityTransform::identity().m[static_cast<size_t>(i)]) < 1e-12);
    }
    SECTION("pure scale") {
        auto t = SimilarityTransform::from_params(2.0, 0.0, 0.0, 0.0);
        auto inv = invert_transform(t);
        REQUIRE(inv.scale() == Catch::Approx(0.5).epsilon(1e-12));
        REQUIRE(std::abs(inv.theta()) < 1e-12);
        REQUIRE(inv.tx() == 0.0);
        REQUIRE(inv.ty() == 0.0);
    }
    SECTION("round trip on random transforms and points") {
        Rng rng(99);
        for (int trial = 0; trial < 20; ++trial) {
            auto t = SimilarityTransform::from_params(rng.uniform(0.2, 4.0),
                                                      rng.uniform(-3.1, 3.1),
                                                      rng.uniform(-100.0, 100.0),
                                                      rng.uniform(-100.0, 100.0));
            auto inv = invert_transform(t);
            inv.validate();
            for (int i = 0; i < 100; ++i) {
                double x = rng.uniform(-50.0, 50.0), y = rng.uniform(-50.0, 50.0);
                auto fwd = t.apply(x, y);
                auto back = inv.apply(fwd[0], fwd[1]);
                REQUIRE(std::abs(back[0] - x) < 1e-9);
                REQUIRE(std::abs(back[1] - y) < 1e-9);
            }
        }
    }
}

TEST_CASE("warp_bilinear: identity transform copies the image exactly") {
    Rng rng(11);
    Tensor img = testsupport::random_tensor({3, 8, 10}, rng);
    Tensor out = warp_bilinear(img, SimilarityTransform::identity(), 8, 10);
    REQUIRE(max_abs_diff(img, out) == 0.0);
}

TEST_CASE("warp_bilinear: constant image stays constant under any transform") {
    Tensor img({3, 12, 12}, 0.5);
    Rng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        auto t = SimilarityTransform::from_params(rng.uniform(0.3, 2.0), rng.uniform(-3.0, 3.0),
                                                  rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0));
        Tensor out = warp_bilinear(img, t, 9, 7);
        for (int64_t i = 0; i < out.numel(); ++i) REQUIRE(out[i] == Catch::Approx(0.5).epsilon(1e-12));
    }
}

TEST_CASE("warp_bilinear: preserves value range") {
    Rng rng(31);
    Tensor img = testsupport::random_tensor({3, 10, 10}, rng, 0.2, 0.8);
    auto t = SimilarityTransform::from_params(1.3, 0.4, -2.0, 1.0);
    Tensor out = warp_bilinear(img, t, 14, 14);
    REQUIRE(out.min() >= img.min());
    REQUIRE(out.max() <= img.max());
}

TEST_CASE("warp_bilinear: rejects non-3-channel input") {
    Tensor bad({1, 8, 8}, 0.0);
    REQUIRE_THROWS_AS(warp_bilinear(bad, SimilarityTransform::identity(), 8, 8), ShapeError);
}

TEST_CASE("warp_bilinear: gradient w.r.t. image matches finite differences") {
    Rng rng(41);
    Tensor img = testsupport::random_tensor({3, 16, 16}, rng);
    // Off-grid transform so sample positions are not on integer lines.
    auto t = SimilarityTransform::from_params(1.07, 0.23, 1.37, -0.61);
    auto r = testsupport::gradcheck(
        [&](const Var& v) { return ad::sum(warp_bilinear(v, t, 12, 12)); }, img, 50, rng);
    INFO(r.detail);
    REQUIRE(r.ok);
}

TEST_CASE("warp_bilinear: gradient w.r.t. transform params matches finite differences") {
    Rng rng(51);
    Tensor img = testsupport::random_tensor({3, 16, 16}, rng);
    auto t = SimilarityTransform::from_params(1.07, 0.23, 1.37, -0.61);
    Tensor params({6});
    for (int i = 0; i < 6; ++i) params[i] = t.m[static_cast<size_t>(i)];
    auto r = testsupport::gradcheck(
        [&](const Var& p) {
            return ad::sum(warp_bilinear_params(Var::constant(img), p, 12, 12));
        },
        params, 6, rng, 1e-4, 1e-6);
    INFO(r.detail);
    REQUIRE(r.ok);
}

TEST_CASE("align_face: portrait already in template coordinates") {
    FaceTemplate tmpl = FaceTemplate::arcface(32);
    Rng rng(61);
    Tensor portrait = testsupport::random_tensor({3, 48, 48}, rng);
    Tensor aligned = align_face(portrait, tmpl.points, tmpl);
    REQUIRE(aligned.shape() == std::vector<int>{3, 32, 32});
    // Identity estimate: output equals the top-left side x side crop.
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                REQUIRE(aligned.at(c, y, x) == Catch::Approx(portrait.at(c, y, x)).margin(1e-12));
}

TEST_CASE("align_face: idempotent on already-aligned inputs") {
    FaceTemplate tmpl = FaceTemplate::arcface(32);
    Rng rng(71);
    Tensor crop = testsupport::random_tensor({3, 32, 32}, rng);
    Tensor again = align_face(crop, tmpl.points, tmpl);
    REQUIRE(mean_abs_diff(crop, again) < 0.02);
}

TEST_CASE("align_face: gradient flows only inside the warp footprint") {
    FaceTemplate tmpl = FaceTemplate::arcface(16);
    // Place the face in the lower-right of a larger portrait.
    auto place = SimilarityTransform::from_params(1.5, 0.2, 30.0, 28.0);
    Landmarks5 lm = place.apply(tmpl.points);
    Rng rng(81);
    Tensor portrait = testsupport::random_tensor({3, 64, 64}, rng);

    Var leaf = Var::leaf(portrait);
    Var aligned = align_face(leaf, lm, tmpl);
    ad::backward(ad::mean(aligned));
    Tensor g = leaf.grad_or_zero();

    // Pixels far from the face (top-left corner) receive no gradient.
    REQUIRE(g.at(0, 0, 0) == 0.0);
    REQUIRE(g.at(1, 2, 2) == 0.0);
    double total = 0;
    for (int64_t i = 0; i < g.numel(); ++i) total += std::abs(g[i]);
    REQUIRE(total > 0.0);

    auto r = testsupport::gradcheck(
        [&](const Var& v) { return ad::mean(align_face(v, lm, tmpl)); }, portrait, 40, rng);
    INFO(r.detail);
    REQUIRE(r.ok);
}
