#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "headsup/degrade.hpp"
#include "headsup/geometry.hpp"
#include "headsup/identity.hpp"
#include "headsup/image.hpp"
#include "headsup/rng.hpp"
#include "headsup/tensor.hpp"

namespace headsup::data {

// ---------------------------------------------------------------------------
// Synthetic portrait generator. The scene is a continuous color function of
// image coordinates: a smooth textured background plus an elliptical head
// whose interior texture is a fixed function of the identity seed, with
// eye/nose/mouth markers at canonically placed, scene-jittered positions.
// Canonical face coordinates are the ArcFace template layout recentred and
// divided by 112, so an aligned crop sees the identity texture in a
// consistent frame.
// ---------------------------------------------------------------------------

namespace detail {

inline std::array<std::array<double, 2>, 5> canonical_landmarks() {
    geo::FaceTemplate t = geo::FaceTemplate::arcface(112);
    double cx = 0, cy = 0;
    for (const auto& p : t.points.pts) {
        cx += p[0];
        cy += p[1];
    }
    cx /= 5.0;
    cy /= 5.0;
    std::array<std::array<double, 2>, 5> out;
    for (size_t i = 0; i < 5; ++i)
        out[i] = {(t.points.pts[i][0] - cx) / 112.0, (t.points.pts[i][1] - cy) / 112.0};
    return out;
}

// Canonical -> template pixel coordinates for a template of the given side.
inline geo::SimilarityTransform canonical_to_template(const geo::FaceTemplate& tmpl) {
    double cx = 0, cy = 0;
    for (const auto& p : tmpl.points.pts) {
        cx += p[0];
        cy += p[1];
    }
    return geo::SimilarityTransform::from_params(tmpl.side, 0.0, cx / 5.0, cy / 5.0);
}

inline double smooth_inside(double r, double edge) {
    // 1 well inside (r < 1), 0 outside, logistic edge of width `edge`.
    return 1.0 / (1.0 + std::exp((r - 1.0) / edge));
}

}  // namespace detail

// Identity-determined appearance: base colors plus four sinusoidal gratings.
// Grating amplitudes dominate the (identity-independent) marker footprint so
// the embedder separates identities with margin.
struct FaceAppearance {
    static constexpr int kGratings = 6;

    std::array<double, 3> skin;
    std::array<double, 3> marker_color;
    double marker_size = 1.0;
    // Persistent per-identity facial geometry: small canonical-space offsets
    // of the five markers (face shape), on top of per-scene jitter.
    std::array<std::array<double, 2>, 5> marker_offset{};
    std::array<std::array<double, 3>, kGratings> grating;  // (fx, fy, phase)
    std::array<std::array<double, 3>, kGratings> grating_rgb;

    static FaceAppearance from_seed(uint64_t identity_seed) {
        Rng rng(identity_seed, /*salt=*/0xFACEu);
        FaceAppearance a;
        for (int c = 0; c < 3; ++c) a.skin[static_cast<size_t>(c)] = rng.uniform(0.45, 0.7);
        // Markers stay visibly darker than skin but with modest contrast.
        for (int c = 0; c < 3; ++c)
            a.marker_color[static_cast<size_t>(c)] =
                std::clamp(a.skin[static_cast<size_t>(c)] - rng.uniform(0.15, 0.3), 0.02, 1.0);
        a.marker_size = rng.uniform(0.85, 1.2);
        for (size_t i = 0; i < 5; ++i)
            a.marker_offset[i] = {rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02)};
        for (int g = 0; g < kGratings; ++g) {
            double f = rng.uniform(1.5, 6.5);
            double ang = rng.uniform(0.0, 2.0 * M_PI);
            a.grating[static_cast<size_t>(g)] = {f * std::cos(ang), f * std::sin(ang),
                                                 rng.uniform(0.0, 2.0 * M_PI)};
            for (int c = 0; c < 3; ++c)
                a.grating_rgb[static_cast<size_t>(g)][static_cast<size_t>(c)] =
                    rng.uniform(0.05, 0.12);
        }
        return a;
    }

    std::array<double, 3> texture(double u, double v) const {
        std::array<double, 3> col = skin;
        for (size_t g = 0; g < kGratings; ++g) {
            double s = std::sin(2.0 * M_PI * (grating[g][0] * u + grating[g][1] * v) +
                                grating[g][2]);
            for (size_t c = 0; c < 3; ++c) col[c] += grating_rgb[g][c] * s;
        }
        return col;
    }
};

// Scene-determined geometry and lighting.
struct SceneLayout {
    geo::SimilarityTransform face_to_image;  // canonical -> image pixels
    std::array<std::array<double, 2>, 5> markers;  // canonical, jittered
    double face_frac = 0.4;
    // background: two low-frequency gratings on top of a base color
    std::array<double, 3> bg_color;
    std::array<double, 4> bg_wave;  // fx, fy, phase, amplitude
    // lighting: brightness shift plus linear gradient across the face
    double light_shift = 0.0;
    std::array<double, 3> light_grad;  // gx, gy (canonical), amplitude
};

struct SynthOptions {
    double face_frac_lo = 0.2;
    double face_frac_hi = 0.6;
    double max_rot_deg = 20.0;
    double marker_jitter = 0.008;  // canonical units
};

// Head ellipse semi-axes in canonical units; chosen so the template crop is
// fully covered by face texture (corners included).
inline constexpr double kFaceAx = 0.72;
inline constexpr double kFaceAy = 0.78;

inline SceneLayout sample_layout(uint64_t scene_seed, int size, const SynthOptions& opt = {}) {
    Rng rng(scene_seed, /*salt=*/0x5CE11Eu);
    SceneLayout sl;
    sl.face_frac = rng.uniform(opt.face_frac_lo, opt.face_frac_hi);
    double k = sl.face_frac * size / (2.0 * kFaceAx);
    double theta = rng.uniform(-opt.max_rot_deg, opt.max_rot_deg) * M_PI / 180.0;
    double margin = 1.05 * kFaceAy * k;
    double lo = margin, hi = size - margin;
    double cx = lo < hi ? rng.uniform(lo, hi) : size / 2.0;
    double cy = lo < hi ? rng.uniform(lo, hi) : size / 2.0;
    sl.face_to_image = geo::SimilarityTransform::from_params(k, theta, cx, cy);

    auto canon = detail::canonical_landmarks();
    for (size_t i = 0; i < 5; ++i)
        sl.markers[i] = {canon[i][0] + rng.uniform(-opt.marker_jitter, opt.marker_jitter),
                         canon[i][1] + rng.uniform(-opt.marker_jitter, opt.marker_jitter)};

    for (int c = 0; c < 3; ++c) sl.bg_color[static_cast<size_t>(c)] = rng.uniform(0.2, 0.75);
    double bf = rng.uniform(0.8, 2.5), bang = rng.uniform(0.0, 2.0 * M_PI);
    sl.bg_wave = {bf * std::cos(bang), bf * std::sin(bang), rng.uniform(0.0, 2.0 * M_PI),
                  rng.uniform(0.05, 0.14)};
    sl.light_shift = rng.uniform(-0.06, 0.06);
    double lang = rng.uniform(0.0, 2.0 * M_PI);
    sl.light_grad = {std::cos(lang), std::sin(lang), rng.uniform(0.0, 0.1)};
    return sl;
}

// Continuous scene color at image pixel coordinates (x, y).
inline std::array<double, 3> scene_color(const FaceAppearance& app, const SceneLayout& sl,
                                         double x, double y, int size) {
    // Background.
    double bx = x / size, by = y / size;
    double bw = sl.bg_wave[3] *
                std::sin(2.0 * M_PI * (sl.bg_wave[0] * bx + sl.bg_wave[1] * by) + sl.bg_wave[2]);
    std::array<double, 3> col;
    for (size_t c = 0; c < 3; ++c) col[c] = sl.bg_color[c] + bw;

    // Face-local coordinates.
    geo::SimilarityTransform inv = geo::invert_transform(sl.face_to_image);
    auto uv = inv.apply(x, y);
    double u = uv[0], v = uv[1];
    double k = sl.face_to_image.scale();
    double edge = 1.0 / std::max(1.0, k);  // ~1 pixel soft edge

    double r_face = std::sqrt((u / kFaceAx) * (u / kFaceAx) + (v / kFaceAy) * (v / kFaceAy));
    double a_face = detail::smooth_inside(r_face, edge);
    if (a_face > 1e-6) {
        std::array<double, 3> face = app.texture(u, v);
        // Markers: eyes slightly larger than nose/mouth blobs.
        static constexpr std::array<double, 5> kMarkerR = {0.055, 0.055, 0.04, 0.045, 0.045};
        for (size_t i = 0; i < 5; ++i) {
            double mr = kMarkerR[i] * app.marker_size;
            double du = u - sl.markers[i][0], dv = v - sl.markers[i][1];
            double rm = std::sqrt(du * du + dv * dv) / mr;
            double am = detail::smooth_inside(rm, edge / mr);
            for (size_t c = 0; c < 3; ++c)
                face[c] = face[c] * (1 - am) + app.marker_color[c] * am;
        }
        // Lighting.
        double light =
            sl.light_shift + sl.light_grad[2] * (sl.light_grad[0] * u + sl.light_grad[1] * v);
        for (size_t c = 0; c < 3; ++c) {
            double fc = face[c] + light;
            col[c] = col[c] * (1 - a_face) + fc * a_face;
        }
    }
    for (size_t c = 0; c < 3; ++c) col[c] = std::clamp(col[c], 0.0, 1.0);
    return col;
}

inline Tensor render_portrait(const FaceAppearance& app, const SceneLayout& sl, int size) {
    Tensor img({3, size, size});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            auto c = scene_color(app, sl, x, y, size);
            for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = c[static_cast<size_t>(ch)];
        }
    return img;
}

// Analytic aligned view: the scene evaluated directly on the template grid
// through the known placement (oracle for align_face round trips).
inline Tensor render_template_view(const FaceAppearance& app, const SceneLayout& sl, int size,
                                   const geo::FaceTemplate& tmpl) {
    geo::SimilarityTransform s_inv = geo::invert_transform(detail::canonical_to_template(tmpl));
    Tensor img({3, tmpl.side, tmpl.side});
    for (int y = 0; y < tmpl.side; ++y)
        for (int x = 0; x < tmpl.side; ++x) {
            auto canon = s_inv.apply(x, y);
            auto pix = sl.face_to_image.apply(canon[0], canon[1]);
            auto c = scene_color(app, sl, pix[0], pix[1], size);
            for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = c[static_cast<size_t>(ch)];
        }
    return img;
}

inline geo::Landmarks5 layout_landmarks(const SceneLayout& sl) {
    geo::Landmarks5 lm;
    for (size_t i = 0; i < 5; ++i) {
        auto p = sl.face_to_image.apply(sl.markers[i][0], sl.markers[i][1]);
        lm.pts[i] = {p[0], p[1]};
    }
    return lm;
}

// Deterministic portrait synthesis: returns the rendered image and the exact
// landmarks of the placed markers.
inline std::pair<Tensor, geo::Landmarks5> synth_portrait(uint64_t identity_seed,
                                                         uint64_t scene_seed, int size,
                                                         const SynthOptions& opt = {}) {
    if (size < 64) throw RangeError("synth_portrait: size must be >= 64");
    FaceAppearance app = FaceAppearance::from_seed(identity_seed);
    SceneLayout sl = sample_layout(scene_seed, size, opt);
    for (size_t i = 0; i < 5; ++i) {
        sl.markers[i][0] += app.marker_offset[i][0];
        sl.markers[i][1] += app.marker_offset[i][1];
    }
    return {render_portrait(app, sl, size), layout_landmarks(sl)};
}

// ---------------------------------------------------------------------------
// Records and manifests.
// ---------------------------------------------------------------------------

struct PortraitRecord {
    int64_t id = 0;
    std::string image;  // path relative to the manifest directory
    geo::Landmarks5 lm;
    int64_t identity_seed = -1;
    double eye_distance = 0.0;
    std::string split;  // "train" | "test"

    void validate() const {
        if (std::abs(eye_distance - lm.eye_distance()) > 1e-6)
            throw ContractViolation("PortraitRecord: stored eye_distance disagrees with landmarks");
    }
};

struct TripletRecord {
    std::string lq;   // path (may be empty before the degrade stage runs)
    std::string hq;   // path
    std::string ref;  // path or empty for the reference-free triplet
    std::array<double, 4> mask_box{0, 0, 0, 0};  // HQ pixel coords [x0,y0,x1,y1]
    geo::Landmarks5 lm;                          // HQ coords
    uint64_t degrade_seed = 0;
    std::string split;

    bool has_ref() const { return !ref.empty(); }

    void validate() const {
        bool mask_zero = mask_box[2] <= mask_box[0] || mask_box[3] <= mask_box[1];
        if (has_ref() == mask_zero)
            throw ContractViolation("TripletRecord: ref must be present iff mask box is nonzero");
    }
};

namespace manifest {

inline nlohmann::ordered_json to_json(const PortraitRecord& r) {
    return {{"id", r.id},
            {"image", r.image},
            {"landmarks", r.lm.flat()},
            {"identity_seed", r.identity_seed},
            {"eye_distance", r.eye_distance},
            {"split", r.split}};
}

inline PortraitRecord portrait_from_json(const nlohmann::json& j) {
    PortraitRecord r;
    r.id = j.at("id").get<int64_t>();
    r.image = j.at("image").get<std::string>();
    r.lm = geo::Landmarks5::from_flat(j.at("landmarks").get<std::vector<double>>());
    r.identity_seed = j.at("identity_seed").get<int64_t>();
    r.eye_distance = j.at("eye_distance").get<double>();
    r.split = j.at("split").get<std::string>();
    r.validate();
    return r;
}

inline nlohmann::ordered_json to_json(const TripletRecord& r) {
    return {{"lq", r.lq},
            {"hq", r.hq},
            {"ref", r.has_ref() ? nlohmann::json(r.ref) : nlohmann::json(nullptr)},
            {"mask_box", r.mask_box},
            {"landmarks", r.lm.flat()},
            {"degrade_seed", r.degrade_seed},
            {"split", r.split}};
}

inline TripletRecord triplet_from_json(const nlohmann::json& j) {
    TripletRecord r;
    r.lq = j.at("lq").get<std::string>();
    r.hq = j.at("hq").get<std::string>();
    if (!j.at("ref").is_null()) r.ref = j.at("ref").get<std::string>();
    auto mb = j.at("mask_box").get<std::vector<double>>();
    if (mb.size() != 4) throw IoError("manifest: mask_box must have 4 values");
    for (int i = 0; i < 4; ++i) r.mask_box[static_cast<size_t>(i)] = mb[static_cast<size_t>(i)];
    r.lm = geo::Landmarks5::from_flat(j.at("landmarks").get<std::vector<double>>());
    r.degrade_seed = j.at("degrade_seed").get<uint64_t>();
    r.split = j.at("split").get<std::string>();
    r.validate();
    return r;
}

template <typename Rec, typename ToJson>
void write_jsonl(const std::string& path, const std::vector<Rec>& rows, ToJson to) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("manifest: cannot write " + path);
    for (const auto& r : rows) f << to(r).dump() << "\n";
    if (!f) throw IoError("manifest: write failed for " + path);
}

template <typename Rec, typename FromJson>
std::vector<Rec> read_jsonl(const std::string& path, FromJson from) {
    std::ifstream f(path);
    if (!f) throw IoError("manifest: cannot open " + path);
    std::vector<Rec> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        rows.push_back(from(nlohmann::json::parse(line)));
    }
    return rows;
}

inline void write_portraits(const std::string& path, const std::vector<PortraitRecord>& rows) {
    write_jsonl(path, rows, [](const PortraitRecord& r) { return to_json(r); });
}
inline std::vector<PortraitRecord> read_portraits(const std::string& path) {
    return read_jsonl<PortraitRecord>(path, portrait_from_json);
}
inline void write_triplets(const std::string& path, const std::vector<TripletRecord>& rows) {
    write_jsonl(path, rows, [](const TripletRecord& r) { return to_json(r); });
}
inline std::vector<TripletRecord> read_triplets(const std::string& path) {
    return read_jsonl<TripletRecord>(path, triplet_from_json);
}

}  // namespace manifest

// ---------------------------------------------------------------------------
// Curation: eye-distance filtering, similarity pairing, triplet and test
// reference construction. Pairs are built strictly within a split.
// ---------------------------------------------------------------------------

inline std::vector<PortraitRecord> filter_portraits(const std::vector<PortraitRecord>& records,
                                                    double min_eye_dist) {
    std::vector<PortraitRecord> out;
    for (const auto& r : records)
        if (r.eye_distance >= min_eye_dist) out.push_back(r);
    return out;
}

struct FaceEntry {
    int64_t id = 0;
    Tensor embedding;  // (d)
};

struct FacePair {
    int64_t a = 0, b = 0;
    double phi = 0.0;
};

inline double pair_phi(const Tensor& ea, const Tensor& eb) {
    double dot = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < ea.numel(); ++i) {
        dot += ea[i] * eb[i];
        na += ea[i] * ea[i];
        nb += eb[i] * eb[i];
    }
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

// All ordered pairs (a, b), a != b, with phi(a, b) strictly above gamma.
inline std::vector<FacePair> build_pairs(const std::vector<FaceEntry>& faces, double gamma) {
    if (!(gamma > -1.0 && gamma < 1.0)) throw RangeError("build_pairs: gamma must be in (-1, 1)");
    std::vector<FacePair> out;
    for (size_t i = 0; i < faces.size(); ++i)
        for (size_t j = 0; j < faces.size(); ++j) {
            if (i == j) continue;
            double phi = pair_phi(faces[i].embedding, faces[j].embedding);
            if (phi > gamma) out.push_back({faces[i].id, faces[j].id, phi});
        }
    return out;
}

// Landmark bounding box dilated by 10 percent per side, in the same pixel
// space as the landmarks.
inline std::array<double, 4> landmark_mask_box(const geo::Landmarks5& lm) {
    double x0 = 1e30, y0 = 1e30, x1 = -1e30, y1 = -1e30;
    for (const auto& p : lm.pts) {
        x0 = std::min(x0, p[0]);
        y0 = std::min(y0, p[1]);
        x1 = std::max(x1, p[0]);
        y1 = std::max(y1, p[1]);
    }
    double dx = (x1 - x0) * 0.1, dy = (y1 - y0) * 0.1;
    return {x0 - dx, y0 - dy, x1 + dx, y1 + dy};
}

// One triplet per (portrait, matching reference) pair plus one reference-free
// triplet per portrait. The LQ path records where the degrade stage will
// write; the seed is derived from (global seed, portrait id) so LQ files
// regenerate bitwise under reordering.
inline std::vector<TripletRecord> build_triplets(
    const std::vector<PortraitRecord>& portraits, const std::vector<FacePair>& pairs,
    const std::map<int64_t, std::string>& crop_paths, uint64_t seed,
    const std::string& lq_dir_rel) {
    std::map<int64_t, const PortraitRecord*> by_id;
    for (const auto& p : portraits) by_id[p.id] = &p;

    std::vector<TripletRecord> out;
    for (const auto& p : portraits) {
        TripletRecord base;
        base.hq = p.image;
        base.lq = lq_dir_rel + "/lq_" + std::to_string(p.id) + ".png";
        base.lm = p.lm;
        base.degrade_seed = hash_combine(seed, static_cast<uint64_t>(p.id));
        base.split = p.split;

        // Referenced triplets, partners in ascending id order.
        std::vector<int64_t> partners;
        for (const auto& pr : pairs)
            if (pr.a == p.id && by_id.count(pr.b)) partners.push_back(pr.b);
        std::sort(partners.begin(), partners.end());
        for (int64_t partner : partners) {
            auto it = crop_paths.find(partner);
            if (it == crop_paths.end()) continue;
            TripletRecord t = base;
            t.ref = it->second;
            t.mask_box = landmark_mask_box(p.lm);
            t.validate();
            out.push_back(std::move(t));
        }
        // Reference-free triplet (mask stays all-zero).
        base.validate();
        out.push_back(base);
    }
    return out;
}

// Test-split rule: each face keeps at most its argmax-phi partner; ties break
// toward the lowest partner id.
inline std::map<int64_t, int64_t> assign_test_refs(const std::vector<int64_t>& test_ids,
                                                   const std::vector<FacePair>& pairs) {
    std::map<int64_t, int64_t> out;
    for (int64_t id : test_ids) {
        bool found = false;
        double best_phi = -2.0;
        int64_t best_id = 0;
        for (const auto& p : pairs) {
            if (p.a != id) continue;
            if (!found || p.phi > best_phi || (p.phi == best_phi && p.b < best_id)) {
                found = true;
                best_phi = p.phi;
                best_id = p.b;
            }
        }
        if (found) out[id] = best_id;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch sampling with source mixing ratios and reference dropout.
// ---------------------------------------------------------------------------

struct SampledTriplet {
    TripletRecord record;
    std::string source;
    bool ref_dropped = false;
};

inline std::vector<SampledTriplet> sample_batch(
    const std::vector<std::pair<std::string, const std::vector<TripletRecord>*>>& sources,
    const std::vector<double>& ratios, double ref_drop_prob, int batch, uint64_t seed) {
    if (sources.empty() || sources.size() != ratios.size())
        throw RangeError("sample_batch: sources/ratios size mismatch");
    double total = 0;
    for (double r : ratios) {
        if (r < 0 || !std::isfinite(r)) throw RangeError("sample_batch: negative ratio");
        total += r;
    }
    if (total <= 0) throw RangeError("sample_batch: ratios sum to zero");
    if (ref_drop_prob < 0 || ref_drop_prob > 1)
        throw RangeError("sample_batch: ref_drop_prob out of [0,1]");
    for (size_t s = 0; s < sources.size(); ++s)
        if (ratios[s] > 0 && (sources[s].second == nullptr || sources[s].second->empty()))
            throw EmptyInput("sample_batch: source '" + sources[s].first + "' is empty");

    Rng rng(seed);
    std::vector<SampledTriplet> out;
    out.reserve(static_cast<size_t>(batch));
    for (int i = 0; i < batch; ++i) {
        double u = rng.uniform() * total;
        size_t s = 0;
        double acc = 0;
        for (; s + 1 < sources.size(); ++s) {
            acc += ratios[s];
            if (u < acc) break;
        }
        const auto& rows = *sources[s].second;
        SampledTriplet st;
        st.source = sources[s].first;
        st.record = rows[static_cast<size_t>(
            rng.uniform_int(0, static_cast<int64_t>(rows.size()) - 1))];
        double drop_u = rng.uniform();
        if (st.record.has_ref() && drop_u < ref_drop_prob) {
            st.record.ref.clear();
            st.record.mask_box = {0, 0, 0, 0};
            st.ref_dropped = true;
        }
        out.push_back(std::move(st));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset-level pipelines shared by the CLI and the acceptance suite.
// ---------------------------------------------------------------------------

struct SynthDatasetConfig {
    int count = 32;
    int size = 128;
    int identities = 8;  // identity seeds cycle over [0, identities)
    double test_fraction = 0.25;
    SynthOptions options;
    uint64_t seed = 0;
};

// Renders `count` portraits into dir/portraits and writes dir/portraits.jsonl.
inline std::vector<PortraitRecord> synth_dataset(const std::string& dir,
                                                 const SynthDatasetConfig& cfg) {
    if (cfg.count < 1 || cfg.identities < 1) throw RangeError("synth_dataset: bad counts");
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "portraits");

    std::vector<PortraitRecord> records;
    int n_test = static_cast<int>(std::lround(cfg.count * cfg.test_fraction));
    for (int i = 0; i < cfg.count; ++i) {
        uint64_t identity_seed = hash_combine(cfg.seed, 1000 + static_cast<uint64_t>(i) %
                                                            static_cast<uint64_t>(cfg.identities));
        uint64_t scene_seed = hash_combine(cfg.seed, 2000 + static_cast<uint64_t>(i));
        auto [img_t, lm] = synth_portrait(identity_seed, scene_seed, cfg.size, cfg.options);

        PortraitRecord r;
        r.id = i;
        r.image = "portraits/p" + std::to_string(i) + ".png";
        r.lm = lm;
        r.identity_seed = static_cast<int64_t>(identity_seed);
        r.eye_distance = lm.eye_distance();
        r.split = i >= cfg.count - n_test ? "test" : "train";
        img::save_png(img_t, (fs::path(dir) / r.image).string());
        records.push_back(std::move(r));
    }
    manifest::write_portraits((fs::path(dir) / "portraits.jsonl").string(), records);
    return records;
}

struct CurateConfig {
    double gamma = 0.65;
    double min_eye_dist = -1.0;  // < 0: use 64 * size / 3840
    int template_side = 128;
    uint64_t seed = 0;
};

struct CurateResult {
    std::vector<TripletRecord> train;
    std::vector<TripletRecord> test;
    int filtered_out = 0;
};

// Filter, align+embed, pair within splits, build train triplets and at most
// one reference per test face. Writes aligned crops to dir/crops and the two
// manifests train.jsonl / test.jsonl.
inline CurateResult curate_dataset(const std::string& dir,
                                   const std::vector<PortraitRecord>& portraits,
                                   const id::Embedder& embedder, const CurateConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "crops");
    fs::create_directories(fs::path(dir) / "lq");
    geo::FaceTemplate tmpl = geo::FaceTemplate::arcface(cfg.template_side);

    CurateResult result;
    // Eye-distance filter; derive size from the first portrait image.
    double min_eye = cfg.min_eye_dist;
    std::vector<PortraitRecord> kept;
    {
        std::vector<PortraitRecord> sorted = portraits;
        std::sort(sorted.begin(), sorted.end(),
                  [](const PortraitRecord& a, const PortraitRecord& b) { return a.id < b.id; });
        if (min_eye < 0 && !sorted.empty()) {
            Tensor first = img::load_png((fs::path(dir) / sorted.front().image).string());
            min_eye = 64.0 * first.dim(2) / 3840.0;
        }
        kept = filter_portraits(sorted, std::max(0.0, min_eye));
        result.filtered_out = static_cast<int>(sorted.size() - kept.size());
    }

    // Aligned crops and embeddings.
    std::map<int64_t, std::string> crop_paths;
    std::map<std::string, std::vector<FaceEntry>> faces_by_split;
    for (const auto& p : kept) {
        Tensor portrait = img::load_png((fs::path(dir) / p.image).string());
        Tensor crop = geo::align_face(portrait, p.lm, tmpl);
        std::string rel = "crops/c" + std::to_string(p.id) + ".png";
        img::save_png(crop, (fs::path(dir) / rel).string());
        crop_paths[p.id] = rel;
        // Embed the crop as re-read from disk so that curation decisions match
        // what training will actually load.
        Tensor reread = img::load_png((fs::path(dir) / rel).string());
        faces_by_split[p.split].push_back({p.id, embedder.embed(reread).v});
    }

    std::map<std::string, std::vector<PortraitRecord>> kept_by_split;
    for (const auto& p : kept) kept_by_split[p.split].push_back(p);

    // Train: all valid pairs become referenced triplets.
    auto train_pairs = build_pairs(faces_by_split["train"], cfg.gamma);
    result.train = build_triplets(kept_by_split["train"], train_pairs, crop_paths, cfg.seed, "lq");

    // Test: at most one reference per face ("select the most similar one").
    auto test_pairs = build_pairs(faces_by_split["test"], cfg.gamma);
    std::vector<int64_t> test_ids;
    for (const auto& p : kept_by_split["test"]) test_ids.push_back(p.id);
    auto ref_of = assign_test_refs(test_ids, test_pairs);
    std::vector<FacePair> narrowed;
    for (const auto& pr : test_pairs)
        if (ref_of.count(pr.a) && ref_of.at(pr.a) == pr.b) narrowed.push_back(pr);
    result.test = build_triplets(kept_by_split["test"], narrowed, crop_paths, cfg.seed, "lq");

    manifest::write_triplets((fs::path(dir) / "train.jsonl").string(), result.train);
    manifest::write_triplets((fs::path(dir) / "test.jsonl").string(), result.test);
    return result;
}

// Tensors of one triplet loaded from disk (paths resolved against base_dir).
struct LoadedTriplet {
    Tensor lq, hq;
    id::MaybeFace ref = id::MaybeFace::absent();
    std::array<double, 4> mask_box{0, 0, 0, 0};  // HQ pixel coords
    geo::Landmarks5 lm;
};

inline LoadedTriplet load_triplet(const std::string& base_dir, const TripletRecord& rec) {
    namespace fs = std::filesystem;
    LoadedTriplet out;
    if (rec.lq.empty())
        throw ContractViolation("load_triplet: manifest row has no LQ path (run degrade first)");
    out.lq = img::load_png((fs::path(base_dir) / rec.lq).string());
    out.hq = img::load_png((fs::path(base_dir) / rec.hq).string());
    if (rec.has_ref())
        out.ref = id::MaybeFace::of(img::load_png((fs::path(base_dir) / rec.ref).string()));
    out.mask_box = rec.mask_box;
    out.lm = rec.lm;
    return out;
}

// Runs the degradation function over every unique HQ entry of a manifest and
// rewrites it (LQ paths already recorded by curation).
inline void degrade_manifest(const std::string& dir, const std::string& manifest_rel,
                             const deg::DegradeConfig& cfg) {
    namespace fs = std::filesystem;
    auto rows = manifest::read_triplets((fs::path(dir) / manifest_rel).string());
    std::map<std::string, bool> done;
    for (const auto& r : rows) {
        if (done.count(r.lq)) continue;
        Tensor hq = img::load_png((fs::path(dir) / r.hq).string());
        Tensor lq = deg::degrade(hq, cfg, r.degrade_seed);
        fs::create_directories((fs::path(dir) / r.lq).parent_path());
        img::save_png(lq, (fs::path(dir) / r.lq).string());
        done[r.lq] = true;
    }
    manifest::write_triplets((fs::path(dir) / manifest_rel).string(), rows);
}

}  // namespace headsup::data
