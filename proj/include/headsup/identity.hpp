#pragma once

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "headsup/autodiff.hpp"
#include "headsup/image.hpp"
#include "headsup/rng.hpp"
#include "headsup/tensor.hpp"

namespace headsup::id {

// Recognition feature vector. Zero-norm embeddings are rejected so the cosine
// criterion can never produce NaN.
struct IdentityEmbedding {
    Tensor v;  // (d)

    explicit IdentityEmbedding(Tensor t) : v(std::move(t)) {
        if (v.rank() != 1) throw ShapeError("IdentityEmbedding: expected a vector");
        if (!v.all_finite()) throw ContractViolation("IdentityEmbedding: non-finite values");
        if (norm() < 1e-12) throw ContractViolation("IdentityEmbedding: zero-norm embedding");
    }

    double norm() const {
        double s = 0;
        for (int64_t i = 0; i < v.numel(); ++i) s += v[i] * v[i];
        return std::sqrt(s);
    }
};

// An aligned face crop or the distinguished absent value (the x_r = 0
// convention: an absent face has similarity zero with everything).
struct MaybeFace {
    std::optional<Tensor> face;

    static MaybeFace absent() { return {}; }
    static MaybeFace of(Tensor t) {
        require_image(t, "MaybeFace");
        if (t.dim(1) != t.dim(2)) throw ShapeError("MaybeFace: face crop must be square");
        return MaybeFace{std::move(t)};
    }
    bool present() const { return face.has_value(); }
    const Tensor& get() const {
        if (!face) throw ContractViolation("MaybeFace: absent");
        return *face;
    }
};

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual int dim() const = 0;
    virtual IdentityEmbedding embed(const Tensor& face) const = 0;
    // Only differentiable backends may participate in training.
    virtual bool differentiable() const { return false; }
    virtual ad::Var embed_var(const ad::Var&) const {
        throw ContractViolation("Embedder: backend does not support gradients");
    }
};

// Deterministic toy recognition backend: grayscale -> area-downsample to
// 16x16 -> subtract mean -> flatten -> fixed random projection. Built from
// differentiable primitives so identity losses can backpropagate through it.
class ToyEmbedder : public Embedder {
public:
    static constexpr uint64_t kProjectionSeed = 20240613;
    static constexpr int kPoolSide = 16;

    explicit ToyEmbedder(int d = 128) : d_(d) {
        if (d < 1) throw RangeError("ToyEmbedder: d must be positive");
        const int in_n = kPoolSide * kPoolSide;
        Tensor proj({d, in_n});
        for (int row = 0; row < d; ++row) {
            Rng r(kProjectionSeed, static_cast<uint64_t>(row));
            for (int col = 0; col < in_n; ++col)
                proj[static_cast<int64_t>(row) * in_n + col] = r.normal() / 16.0;
        }
        proj_ = std::move(proj);
    }

    int dim() const override { return d_; }
    bool differentiable() const override { return true; }

    ad::Var embed_var(const ad::Var& face) const override {
        const Tensor& v = face.value();
        require_image(v, "ToyEmbedder::embed");
        if (v.dim(1) != v.dim(2)) throw ShapeError("ToyEmbedder::embed: face must be square");
        if (v.dim(1) < kPoolSide) throw ShapeError("ToyEmbedder::embed: face smaller than 16x16");
        using namespace ad;
        Var gray = gray_of(face);
        Var pooled = adaptive_avg_pool2d(gray, kPoolSide, kPoolSide);
        Var centered = sub(pooled, mean(pooled));
        Var flat = reshape(centered, {kPoolSide * kPoolSide});
        return matvec(Var::constant(proj_), flat);
    }

    IdentityEmbedding embed(const Tensor& face) const override {
        return IdentityEmbedding(embed_var(ad::Var::constant(face)).value());
    }

private:
    static ad::Var gray_of(const ad::Var& rgb) {
        using namespace ad;
        Var r = slice_channels(rgb, 0, 1);
        Var g = slice_channels(rgb, 1, 2);
        Var b = slice_channels(rgb, 2, 3);
        return add(add(mul(r, 0.299), mul(g, 0.587)), mul(b, 0.114));
    }

    int d_;
    Tensor proj_;
};

// Shells out to `<cmd> <image-path>`; the command must print a JSON array of
// d floats on stdout. Inference only; the training path refuses it.
class ExternalEmbedder : public Embedder {
public:
    ExternalEmbedder(std::string cmd, int d) : cmd_(std::move(cmd)), d_(d) {}

    int dim() const override { return d_; }

    IdentityEmbedding embed(const Tensor& face) const override {
        std::lock_guard<std::mutex> lock(mu_);
        std::string path = temp_path();
        img::save_png(face, path);
        std::string full = cmd_ + " " + path;
        FILE* pipe = popen(full.c_str(), "r");
        if (!pipe) {
            std::remove(path.c_str());
            throw IoError("ExternalEmbedder: cannot spawn: " + full);
        }
        std::string out;
        char buf[4096];
        size_t n;
        while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) out.append(buf, n);
        int rc = pclose(pipe);
        std::remove(path.c_str());
        if (rc != 0) throw IoError("ExternalEmbedder: command failed: " + full);

        nlohmann::json j;
        try {
            j = nlohmann::json::parse(out);
        } catch (const std::exception& e) {
            throw IoError(std::string("ExternalEmbedder: bad JSON output: ") + e.what());
        }
        if (!j.is_array() || static_cast<int>(j.size()) != d_)
            throw IoError("ExternalEmbedder: expected a JSON array of " + std::to_string(d_) +
                          " floats");
        Tensor v({d_});
        for (int i = 0; i < d_; ++i) v[i] = j[static_cast<size_t>(i)].get<double>();
        return IdentityEmbedding(std::move(v));
    }

private:
    std::string temp_path() const {
        static std::atomic<uint64_t> counter{0};
        return "/tmp/headsup_embed_" + std::to_string(getpid()) + "_" +
               std::to_string(counter.fetch_add(1)) + ".png";
    }

    std::string cmd_;
    int d_;
    mutable std::mutex mu_;
};

// ---------------------------------------------------------------------------
// The pairwise identity criterion phi: cosine similarity of recognition
// features, defined as exactly 0 against an absent face.
// ---------------------------------------------------------------------------

inline double cosine(const IdentityEmbedding& a, const IdentityEmbedding& b) {
    if (a.v.numel() != b.v.numel()) throw ShapeError("cosine: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < a.v.numel(); ++i) {
        dot += a.v[i] * b.v[i];
        na += a.v[i] * a.v[i];
        nb += b.v[i] * b.v[i];
    }
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double similarity(const MaybeFace& x, const MaybeFace& y, const Embedder& embedder) {
    if (!x.present() || !y.present()) return 0.0;
    return cosine(embedder.embed(x.get()), embedder.embed(y.get()));
}

// Differentiable cosine of two embedding Vars (guards zero norms).
inline ad::Var cosine_var(const ad::Var& a, const ad::Var& b) {
    using namespace ad;
    if (a.value().numel() != b.value().numel()) throw ShapeError("cosine_var: dimension mismatch");
    Var na = sqrt(sum(square(a)));
    Var nb = sqrt(sum(square(b)));
    if (na.item() < 1e-12 || nb.item() < 1e-12)
        throw ContractViolation("cosine_var: zero-norm embedding");
    return clamp(div(dot(a, b), mul(na, nb)), -1.0, 1.0);
}

}  // namespace headsup::id
