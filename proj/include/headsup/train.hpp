#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "headsup/data.hpp"
#include "headsup/losses.hpp"
#include "headsup/model.hpp"

namespace headsup::train {

struct TrainConfig {
    double lr = 5e-5;
    double weight_decay = 1e-2;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    int total_steps = 3000;
    int stage1_steps = 800;
    std::vector<double> stage1_ratios{1.0};
    std::vector<double> stage2_ratios{1.0};
    int batch_size = 2;
    uint64_t seed = 0;
    double ref_drop_prob = 0.2;
    int checkpoint_interval = 500;
    int template_side = 128;
    loss::FaceLossWeights face_weights;
    loss::ObjectiveWeights objective_weights;
    std::string reg_kind = "none";  // none | latent_l2
    // Autoencoder pretraining of the VAE before restoration training.
    int pretrain_steps = 1200;
    double pretrain_lr = 2e-3;
    int pretrain_batch = 4;

    void validate() const {
        if (lr <= 0 || pretrain_lr <= 0) throw RangeError("TrainConfig: lr must be positive");
        if (stage1_steps > total_steps)
            throw RangeError("TrainConfig: stage1_steps must not exceed total_steps");
        if (batch_size < 1 || pretrain_batch < 1) throw RangeError("TrainConfig: bad batch size");
        if (ref_drop_prob < 0 || ref_drop_prob > 1)
            throw RangeError("TrainConfig: ref_drop_prob out of [0,1]");
        if (reg_kind != "none" && reg_kind != "latent_l2")
            throw ConfigError("TrainConfig: unknown reg_kind " + reg_kind);
        face_weights.validate();
        objective_weights.validate();
    }
};

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay). A parameter is only updated when the step's
// graph actually produced a gradient for it, so unused parameters stay put.
// ---------------------------------------------------------------------------

struct AdamW {
    double lr = 5e-5;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 1e-2;

    void step(const std::vector<model::ParamPtr>& params, const model::Tape& tape) const {
        for (const auto& p : params) {
            if (!p->trainable || !tape.used(p)) continue;
            Tensor g = tape.grad_of(p);
            bool any = false;
            for (int64_t i = 0; i < g.numel(); ++i)
                if (g[i] != 0.0) {
                    any = true;
                    break;
                }
            if (!any) continue;
            if (!p->adam_m.defined()) {
                p->adam_m = Tensor::zeros(p->value.shape());
                p->adam_v = Tensor::zeros(p->value.shape());
            }
            ++p->adam_step;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(p->adam_step));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(p->adam_step));
            for (int64_t i = 0; i < g.numel(); ++i) {
                double gi = g[i];
                p->adam_m[i] = beta1 * p->adam_m[i] + (1.0 - beta1) * gi;
                p->adam_v[i] = beta2 * p->adam_v[i] + (1.0 - beta2) * gi * gi;
                double mhat = p->adam_m[i] / bc1;
                double vhat = p->adam_v[i] / bc2;
                p->value[i] -=
                    lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p->value[i]);
            }
        }
    }
};

// ---------------------------------------------------------------------------
// One optimization step: generator pass (restore + total objective, adapters
// and extended channels update) then discriminator pass on detached
// predictions.
// ---------------------------------------------------------------------------

struct TrainState {
    model::Model model;
    model::Discriminator disc;
    int64_t step = 0;
};

struct BatchItem {
    Tensor lq, hq;
    id::MaybeFace ref = id::MaybeFace::absent();
    model::FaceMask mask{Tensor({1, 1}, 0.0)};
    geo::Landmarks5 lm;
};

inline BatchItem to_batch_item(const data::LoadedTriplet& t, int factor) {
    BatchItem b;
    b.lq = t.lq;
    b.hq = t.hq;
    b.ref = t.ref;
    b.lm = t.lm;
    const int lh = t.lq.dim(1), lw = t.lq.dim(2);
    if (t.ref.present()) {
        b.mask = model::FaceMask::from_box(lh, lw, t.mask_box[0] / factor, t.mask_box[1] / factor,
                                           t.mask_box[2] / factor, t.mask_box[3] / factor);
    } else {
        b.mask = model::FaceMask::zeros(lh, lw);
    }
    return b;
}

inline loss::LossReport train_step(TrainState& st, const std::vector<BatchItem>& batch,
                                   const TrainConfig& cfg, const id::Embedder& embedder) {
    if (batch.empty()) throw EmptyInput("train_step: empty batch");
    cfg.validate();
    const geo::FaceTemplate tmpl = geo::FaceTemplate::arcface(cfg.template_side);
    const auto& ow = cfg.objective_weights;
    const auto& fw = cfg.face_weights;
    const bool adversarial = ow.lambda_face > 0 && fw.lambda_adv > 0;
    const double inv_n = 1.0 / static_cast<double>(batch.size());

    // Generator pass. Discriminator parameters enter as frozen leaves so the
    // adversarial gradient flows into the prediction but not into the critic.
    model::Tape tape(true);
    model::Tape disc_frozen(false);
    loss::DiscriminatorFn disc_fn;
    if (adversarial)
        disc_fn = [&](const ad::Var& face) { return st.disc.forward(disc_frozen, face); };

    ad::Var batch_total;
    loss::LossReport report;
    std::vector<Tensor> pred_faces, gt_faces;
    for (const auto& item : batch) {
        ad::Var z_hat;
        ad::Var x_hat = model::restore(tape, st.model, item.lq, item.ref, item.mask,
                                       /*with_lora=*/true, &z_hat);
        std::optional<ad::Var> reg;
        if (cfg.reg_kind == "latent_l2" && ow.lambda_reg > 0)
            reg = ad::mean(ad::square(z_hat));
        auto obj = loss::total_objective(item.hq, x_hat, item.lm, item.ref, disc_fn, ow, fw, tmpl,
                                         embedder, reg);
        batch_total = batch_total.defined() ? ad::add(batch_total, obj.total) : obj.total;
        report.portrait_mse += obj.report.portrait_mse * inv_n;
        report.portrait_perceptual += obj.report.portrait_perceptual * inv_n;
        report.face_fid += obj.report.face_fid * inv_n;
        report.face_id += obj.report.face_id * inv_n;
        report.face_adv_g += obj.report.face_adv_g * inv_n;
        report.reg += obj.report.reg * inv_n;
        report.total += obj.report.total * inv_n;
        if (adversarial) {
            gt_faces.push_back(geo::align_face(item.hq, item.lm, tmpl));
            pred_faces.push_back(geo::align_face(x_hat.value(), item.lm, tmpl));
        }
    }
    if (!report.all_finite())
        throw NonFiniteLoss("train_step: non-finite loss component at step " +
                            std::to_string(st.step) + ": " +
                            nlohmann::json({{"total", report.total},
                                            {"portrait_mse", report.portrait_mse},
                                            {"portrait_perceptual", report.portrait_perceptual},
                                            {"face_fid", report.face_fid},
                                            {"face_id", report.face_id},
                                            {"face_adv_g", report.face_adv_g}})
                                .dump());

    ad::Var mean_total = ad::mul(batch_total, inv_n);
    ad::backward(mean_total);
    AdamW opt{cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay};
    opt.step(st.model.store.all(), tape);

    // Discriminator pass on detached predictions.
    if (adversarial) {
        model::Tape d_tape(true);
        ad::Var d_total;
        for (size_t i = 0; i < pred_faces.size(); ++i) {
            ad::Var real = st.disc.forward(d_tape, ad::Var::constant(gt_faces[i]));
            ad::Var fake = st.disc.forward(d_tape, ad::Var::constant(pred_faces[i]));
            ad::Var d = loss::adversarial_losses(real, fake).d_loss;
            d_total = d_total.defined() ? ad::add(d_total, d) : d;
        }
        d_total = ad::mul(d_total, inv_n);
        report.face_adv_d = d_total.item();
        if (!std::isfinite(report.face_adv_d))
            throw NonFiniteLoss("train_step: non-finite discriminator loss");
        ad::backward(d_total);
        opt.step(st.disc.store.all(), d_tape);
    }

    ++st.step;
    return report;
}

// ---------------------------------------------------------------------------
// VAE autoencoder pretraining on HQ portraits (before restoration training
// the decoder is calibrated, then frozen).
// ---------------------------------------------------------------------------

inline double pretrain_vae(TrainState& st, const std::vector<Tensor>& portraits,
                           const TrainConfig& cfg, std::ostream* log = nullptr) {
    if (portraits.empty()) throw EmptyInput("pretrain_vae: no portraits");
    model::set_pretrain_mode(st.model);
    AdamW opt{cfg.pretrain_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, 0.0};
    double last = 0.0;
    for (int step = 0; step < cfg.pretrain_steps; ++step) {
        Rng rng(hash_combine(cfg.seed, 0xAE00u + static_cast<uint64_t>(step)));
        model::Tape tape(true);
        ad::Var total;
        for (int b = 0; b < cfg.pretrain_batch; ++b) {
            const Tensor& x = portraits[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int64_t>(portraits.size()) - 1))];
            ad::Var z = st.model.encoder.forward(tape, ad::Var::constant(x), /*with_lora=*/false);
            ad::Var rec = st.model.decoder.forward(tape, z);
            ad::Var l = loss::mse_var(ad::Var::constant(x), rec);
            total = total.defined() ? ad::add(total, l) : l;
        }
        total = ad::mul(total, 1.0 / cfg.pretrain_batch);
        last = total.item();
        if (!std::isfinite(last)) throw NonFiniteLoss("pretrain_vae: non-finite loss");
        ad::backward(total);
        opt.step(st.model.store.all(), tape);
        if (log && (step % 50 == 0 || step + 1 == cfg.pretrain_steps))
            (*log) << nlohmann::ordered_json({{"phase", "pretrain"},
                                              {"step", step},
                                              {"mse", last}})
                          .dump()
                   << "\n";
    }
    model::set_restore_mode(st.model);
    return last;
}

// ---------------------------------------------------------------------------
// Full two-stage training loop over triplet manifests.
// ---------------------------------------------------------------------------

struct TrainSource {
    std::string name;
    std::vector<data::TripletRecord> rows;
};

inline loss::LossReport run_training_steps(TrainState& st, const TrainConfig& cfg,
                                           const std::vector<TrainSource>& sources,
                                           const std::string& base_dir, int factor,
                                           std::ostream& log, const id::Embedder& embedder,
                                           const std::string& ckpt_dir = "") {
    cfg.validate();
    if (sources.empty()) throw EmptyInput("run_training_steps: no sources");
    if (cfg.stage1_ratios.size() != sources.size() || cfg.stage2_ratios.size() != sources.size())
        throw RangeError("run_training_steps: ratio count must match source count");

    std::vector<std::pair<std::string, const std::vector<data::TripletRecord>*>> views;
    for (const auto& s : sources) views.emplace_back(s.name, &s.rows);

    loss::LossReport last;
    while (st.step < cfg.total_steps) {
        const int stage = st.step < cfg.stage1_steps ? 1 : 2;
        const auto& ratios = stage == 1 ? cfg.stage1_ratios : cfg.stage2_ratios;
        auto sampled = data::sample_batch(views, ratios, cfg.ref_drop_prob, cfg.batch_size,
                                          hash_combine(cfg.seed, static_cast<uint64_t>(st.step)));
        std::vector<BatchItem> batch;
        std::map<std::string, int> source_counts;
        int dropped = 0;
        for (const auto& s : sampled) {
            batch.push_back(to_batch_item(data::load_triplet(base_dir, s.record), factor));
            source_counts[s.source]++;
            dropped += s.ref_dropped ? 1 : 0;
        }
        int64_t step_before = st.step;
        last = train_step(st, batch, cfg, embedder);

        nlohmann::ordered_json line{{"step", step_before},
                                    {"stage", stage},
                                    {"lr", cfg.lr},
                                    {"total", last.total},
                                    {"portrait_mse", last.portrait_mse},
                                    {"portrait_perceptual", last.portrait_perceptual},
                                    {"face_fid", last.face_fid},
                                    {"face_id", last.face_id},
                                    {"face_adv_g", last.face_adv_g},
                                    {"face_adv_d", last.face_adv_d},
                                    {"reg", last.reg},
                                    {"ref_dropped", dropped}};
        nlohmann::ordered_json sc;
        for (const auto& [k, v] : source_counts) sc[k] = v;
        line["sources"] = sc;
        log << line.dump() << "\n";
        log.flush();

        if (!ckpt_dir.empty() &&
            (st.step % cfg.checkpoint_interval == 0 || st.step == cfg.total_steps)) {
            namespace fs = std::filesystem;
            fs::create_directories(ckpt_dir);
            model::save_checkpoint(
                (fs::path(ckpt_dir) / ("ckpt_" + std::to_string(st.step) + ".bin")).string(),
                st.model, &st.disc, {{"step", st.step}, {"stage", stage}});
        }
    }
    return last;
}

}  // namespace headsup::train
