#include <sys/stat.h>

#include <catch2/catch_amalgamated.hpp>

#include "headsup/identity.hpp"
#include "headsup/rng.hpp"
#include "support/gradcheck.hpp"

using namespace headsup;
using namespace headsup::id;

namespace {

// Injectable stub: maps a face to a fixed vector chosen by its mean value.
class StubEmbedder : public Embedder {
public:
    using Fn = std::function<Tensor(const Tensor&)>;
    explicit StubEmbedder(Fn fn, int d) : fn_(std::move(fn)), d_(d) {}
    int dim() const override { return d_; }
    bool differentiable() const override { return true; }
    ad::Var embed_var(const ad::Var& face) const override {
        return ad::Var::constant(fn_(face.value()));
    }
    IdentityEmbedding embed(const Tensor& face) const override {
        return IdentityEmbedding(fn_(face));
    }

private:
    Fn fn_;
    int d_;
};

Tensor random_face(Rng& rng, int side = 32) {
    return testsupport::random_tensor({3, side, side}, rng);
}

}  // namespace

TEST_CASE("toy embedder: identical faces give bitwise identical embeddings") {
    ToyEmbedder emb;
    Rng rng(1);
    Tensor face = random_face(rng);
    auto a = emb.embed(face);
    auto b = emb.embed(face);
    REQUIRE(a.v.numel() == 128);
    for (int64_t i = 0; i < a.v.numel(); ++i) REQUIRE(a.v[i] == b.v[i]);
}

TEST_CASE("toy embedder: invariant to constant brightness shifts") {
    ToyEmbedder emb;
    Rng rng(2);
    Tensor face = testsupport::random_tensor({3, 32, 32}, rng, 0.1, 0.7);
    Tensor shifted = face;
    for (int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += 0.1;
    auto a = emb.embed(face);
    auto b = emb.embed(shifted);
    REQUIRE(max_abs_diff(a.v, b.v) < 1e-10);
}

TEST_CASE("toy embedder: rejects non-square input") {
    ToyEmbedder emb;
    Tensor face({3, 32, 48}, 0.5);
    REQUIRE_THROWS_AS(emb.embed(face), ShapeError);
}

TEST_CASE("toy embedder: gradient flows through the embedding") {
    ToyEmbedder emb;
    Rng rng(3);
    Tensor face = random_face(rng);
    auto r = testsupport::gradcheck(
        [&](const ad::Var& v) { return ad::sum(ad::square(emb.embed_var(v))); }, face, 20, rng);
    INFO(r.detail);
    REQUIRE(r.ok);
}

TEST_CASE("similarity: same face gives 1") {
    ToyEmbedder emb;
    Rng rng(4);
    Tensor face = random_face(rng);
    double s = similarity(MaybeFace::of(face), MaybeFace::of(face), emb);
    REQUIRE(std::abs(s - 1.0) < 1e-12);
}

TEST_CASE("similarity: absent faces score exactly zero") {
    ToyEmbedder emb;
    Rng rng(5);
    Tensor face = random_face(rng);
    REQUIRE(similarity(MaybeFace::of(face), MaybeFace::absent(), emb) == 0.0);
    REQUIRE(similarity(MaybeFace::absent(), MaybeFace::of(face), emb) == 0.0);
    REQUIRE(similarity(MaybeFace::absent(), MaybeFace::absent(), emb) == 0.0);
}

TEST_CASE("similarity: antipodal embeddings give -1 via stub") {
    Tensor v({4}, {1.0, -2.0, 3.0, 0.5});
    Tensor nv({4});
    for (int i = 0; i < 4; ++i) nv[i] = -v[i];
    StubEmbedder emb([&](const Tensor& f) { return f.mean() > 0.5 ? v : nv; }, 4);
    Tensor bright({3, 16, 16}, 0.9), dark({3, 16, 16}, 0.1);
    double s = similarity(MaybeFace::of(bright), MaybeFace::of(dark), emb);
    REQUIRE(std::abs(s + 1.0) < 1e-12);
}

TEST_CASE("similarity: symmetric, bounded, scale invariant") {
    ToyEmbedder emb;
    Rng rng(6);
    for (int i = 0; i < 20; ++i) {
        Tensor a = random_face(rng), b = random_face(rng);
        double s1 = similarity(MaybeFace::of(a), MaybeFace::of(b), emb);
        double s2 = similarity(MaybeFace::of(b), MaybeFace::of(a), emb);
        REQUIRE(s1 == Catch::Approx(s2).margin(1e-12));
        REQUIRE(s1 >= -1.0);
        REQUIRE(s1 <= 1.0);
    }
    // Positive scaling of either embedding leaves the cosine unchanged.
    Rng r2(7);
    Tensor base({8});
    for (int i = 0; i < 8; ++i) base[i] = r2.normal();
    for (double k : {0.5, 3.0, 100.0}) {
        Tensor scaled({8});
        for (int i = 0; i < 8; ++i) scaled[i] = k * base[i];
        StubEmbedder emb2([&](const Tensor& f) { return f.mean() > 0.5 ? base : scaled; }, 8);
        Tensor bright({3, 16, 16}, 0.9), dark({3, 16, 16}, 0.1);
        double s = similarity(MaybeFace::of(bright), MaybeFace::of(dark), emb2);
        REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("zero-norm embeddings are rejected, not NaN") {
    REQUIRE_THROWS_AS(IdentityEmbedding(Tensor({4}, 0.0)), ContractViolation);
    ToyEmbedder emb;
    Tensor constant_face({3, 32, 32}, 0.5);  // mean subtraction empties it
    REQUIRE_THROWS_AS(emb.embed(constant_face), ContractViolation);
}

TEST_CASE("external embedder: spawns a command and parses its JSON output") {
    const std::string script = "/tmp/headsup_test_embed.sh";
    {
        FILE* f = fopen(script.c_str(), "w");
        REQUIRE(f != nullptr);
        fputs("#!/bin/sh\necho '[1.0, 2.0, -3.0]'\n", f);
        fclose(f);
        chmod(script.c_str(), 0755);
    }
    ExternalEmbedder emb(script, 3);
    Rng rng(8);
    auto e = emb.embed(random_face(rng));
    REQUIRE(e.v[0] == 1.0);
    REQUIRE(e.v[1] == 2.0);
    REQUIRE(e.v[2] == -3.0);
    REQUIRE_FALSE(emb.differentiable());

    ExternalEmbedder bad("false", 3);
    REQUIRE_THROWS_AS(bad.embed(random_face(rng)), IoError);
    std::remove(script.c_str());
}
