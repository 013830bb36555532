#include <catch2/catch_amalgamated.hpp>

#include "headsup/model.hpp"
#include "headsup/rng.hpp"
#include "support/gradcheck.hpp"

using namespace headsup;
using namespace headsup::model;
using headsup::ad::Var;

TEST_CASE("make_schedule: endpoints, monotonicity, high-precision product") {
    auto ab = make_schedule(1000, 1e-4, 2e-2);
    REQUIRE(ab.size() == 1000);
    REQUIRE(ab[0] == Catch::Approx(0.9999).epsilon(1e-12));
    for (size_t t = 1; t < ab.size(); ++t) REQUIRE(ab[t] < ab[t - 1]);

    // Independent oracle: extended-precision running product.
    long double prod = 1.0L;
    for (int t = 0; t < 1000; ++t) {
        long double beta = 1e-4L + (2e-2L - 1e-4L) * t / 999.0L;
        prod *= (1.0L - beta);
    }
    REQUIRE(std::abs(ab[999] - static_cast<double>(prod)) < 1e-10);

    REQUIRE_THROWS_AS(make_schedule(0, 1e-4, 2e-2), RangeError);
    REQUIRE_THROWS_AS(make_schedule(10, 0.0, 2e-2), RangeError);
    REQUIRE_THROWS_AS(make_schedule(10, 0.5, 0.2), RangeError);
    REQUIRE_THROWS_AS(make_schedule(10, 0.5, 1.0), RangeError);
}

TEST_CASE("diffusion scalars: alpha^2 + beta^2 == 1") {
    auto ab = make_schedule(1000, 1e-4, 2e-2);
    for (int t : {0, 1, 500, 998, 999}) {
        auto s = DiffusionScalars::at(ab, t);
        REQUIRE(std::abs(s.alpha * s.alpha + s.beta * s.beta - 1.0) < 1e-9);
        REQUIRE(s.alpha > 0.0);
        REQUIRE(s.alpha < 1.0);
    }
    REQUIRE_THROWS_AS(DiffusionScalars::at(ab, 1000), RangeError);
    REQUIRE_THROWS_AS(DiffusionScalars::at(ab, -1), RangeError);
}

TEST_CASE("lora_wrap: zero-init adapter leaves the base function unchanged") {
    ParamStore ps;
    Rng rng(1);
    Conv2d base = make_conv(ps, "layer", 3, 8, 3, 1, 1, rng);
    LoraConv2d wrapped = lora_wrap(ps, base, LoRAConfig{}, rng);

    Rng drng(2);
    for (int i = 0; i < 5; ++i) {
        Tensor x = testsupport::random_tensor({3, 6, 6}, drng, -1.0, 1.0);
        Tape t0, t1;
        Tensor y_base = wrapped.base.forward(t0, Var::constant(x)).value();
        Tensor y_adapted = wrapped.forward(t1, Var::constant(x)).value();
        REQUIRE(max_abs_diff(y_base, y_adapted) == 0.0);
    }

    SECTION("base frozen, adapters trainable") {
        REQUIRE_FALSE(wrapped.base.w->trainable);
        REQUIRE_FALSE(wrapped.base.b->trainable);
        REQUIRE(wrapped.down.w->trainable);
        REQUIRE(wrapped.up.w->trainable);
    }

    SECTION("non-degenerate once B is nonzero") {
        for (int64_t i = 0; i < wrapped.up.w->value.numel(); ++i) wrapped.up.w->value[i] = 1.0;
        Tensor x = testsupport::random_tensor({3, 6, 6}, drng, -1.0, 1.0);
        Tape t0, t1;
        Tensor y_base = wrapped.base.forward(t0, Var::constant(x)).value();
        Tensor y_adapted = wrapped.forward(t1, Var::constant(x)).value();
        REQUIRE(max_abs_diff(y_base, y_adapted) > 0.0);
    }

    SECTION("gradients reach A and B but not the frozen base") {
        Tensor x = testsupport::random_tensor({3, 6, 6}, drng, -1.0, 1.0);
        // Make B nonzero so A receives gradient.
        for (int64_t i = 0; i < wrapped.up.w->value.numel(); ++i) wrapped.up.w->value[i] = 0.1;
        Tape t;
        Var y = ad::sum(ad::square(wrapped.forward(t, Var::constant(x))));
        ad::backward(y);
        REQUIRE(t.grad_of(wrapped.down.w).max() != 0.0);
        REQUIRE(t.grad_of(wrapped.up.w).max() != 0.0);
        REQUIRE(t.used(wrapped.base.w));
        REQUIRE(t.grad_of(wrapped.base.w).max() == 0.0);  // leaf created without grad
    }
}

TEST_CASE("extend_input_conv: zero extras annihilate the new channels") {
    ParamStore ps;
    Rng rng(3);
    Conv2d base = make_conv(ps, "conv_in", 4, 8, 3, 1, 1, rng);
    ExtendedConv2d ext = extend_input_conv(ps, base, 5);

    REQUIRE(ext.weight_shape() == std::vector<int>{8, 9, 3, 3});
    Tensor cw = ext.combined_weight();
    REQUIRE(cw.shape() == std::vector<int>{8, 9, 3, 3});

    Rng drng(4);
    for (int i = 0; i < 20; ++i) {
        Tensor z = testsupport::random_tensor({4, 6, 6}, drng, -1.0, 1.0);
        Tensor extra = testsupport::random_tensor({5, 6, 6}, drng, -1.0, 1.0);
        Tensor cat({9, 6, 6});
        for (int64_t j = 0; j < z.numel(); ++j) cat[j] = z[j];
        for (int64_t j = 0; j < extra.numel(); ++j) cat[z.numel() + j] = extra[j];
        Tape t0, t1;
        Tensor y_ext = ext.forward(t0, Var::constant(cat)).value();
        Tensor y_base = base.forward(t1, Var::constant(z)).value();
        REQUIRE(max_abs_diff(y_ext, y_base) == 0.0);
    }

    SECTION("rejects non-4-channel base") {
        Conv2d bad = make_conv(ps, "bad", 3, 8, 3, 1, 1, rng);
        REQUIRE_THROWS_AS(extend_input_conv(ps, bad, 5), ShapeError);
    }
}

TEST_CASE("model: encode/decode shape and determinism contracts") {
    ModelConfig cfg;
    Model m = build_model(cfg, 42);
    Rng rng(5);
    Tensor img = testsupport::random_tensor({3, 64, 64}, rng);

    Tape t1(false), t2(false);
    Tensor z1 = m.encoder.forward(t1, Var::constant(img)).value();
    Tensor z2 = m.encoder.forward(t2, Var::constant(img)).value();
    REQUIRE(z1.shape() == std::vector<int>{4, 8, 8});
    REQUIRE(max_abs_diff(z1, z2) == 0.0);

    Tape t3(false), t4(false);
    Tensor x1 = m.decoder.forward(t3, Var::constant(z1)).value();
    Tensor x2 = m.decoder.forward(t4, Var::constant(z1)).value();
    REQUIRE(x1.shape() == std::vector<int>{3, 64, 64});
    REQUIRE(max_abs_diff(x1, x2) == 0.0);
    REQUIRE(x1.min() >= 0.0);
    REQUIRE(x1.max() <= 1.0);
}

TEST_CASE("denoise_one_step: stub oracles") {
    auto ab = make_schedule(1000, 1e-4, 2e-2);
    Rng rng(6);

    SECTION("all-zero noise prediction gives z_L / alpha exactly") {
        auto s = DiffusionScalars::at(ab, 999);
        Tensor zl = testsupport::random_tensor({4, 8, 8}, rng, -1.0, 1.0);
        Tensor zr = Tensor::zeros({4, 8, 8});
        auto stub = [](const Var& cat) {
            return Var::constant(Tensor::zeros({4, cat.value().dim(1), cat.value().dim(2)}));
        };
        Var out = denoise_one_step(Var::constant(zl), Var::constant(zr),
                                   FaceMask::zeros(16, 16), s, stub);
        for (int64_t i = 0; i < zl.numel(); ++i)
            REQUIRE(out.value()[i] == Catch::Approx(zl[i] / s.alpha).margin(1e-15));
    }

    SECTION("DDIM inversion identity across timesteps") {
        for (int t : {10, 250, 500, 900, 999}) {
            auto s = DiffusionScalars::at(ab, t);
            Tensor z0 = testsupport::random_tensor({4, 8, 8}, rng, -1.0, 1.0);
            Tensor eps = testsupport::random_tensor({4, 8, 8}, rng, -1.0, 1.0);
            Tensor xt({4, 8, 8});
            for (int64_t i = 0; i < z0.numel(); ++i) xt[i] = s.alpha * z0[i] + s.beta * eps[i];
            auto stub = [&eps](const Var&) { return Var::constant(eps); };
            Var out = denoise_one_step(Var::constant(xt), Var::constant(Tensor::zeros({4, 8, 8})),
                                       FaceMask::zeros(16, 16), s, stub);
            REQUIRE(max_abs_diff(out.value(), z0) < 1e-6);
        }
    }

    SECTION("latent resolution mismatch rejected") {
        auto s = DiffusionScalars::at(ab, 999);
        auto stub = [](const Var& cat) {
            return Var::constant(Tensor::zeros({4, cat.value().dim(1), cat.value().dim(2)}));
        };
        REQUIRE_THROWS_AS(
            denoise_one_step(Var::constant(Tensor::zeros({4, 8, 8})),
                             Var::constant(Tensor::zeros({4, 4, 4})), FaceMask::zeros(16, 16), s,
                             stub),
            ShapeError);
    }
}

TEST_CASE("restore: shape contract and the x_r = 0 convention") {
    ModelConfig cfg;
    Model m = build_model(cfg, 43);
    set_restore_mode(m);
    Rng rng(7);
    Tensor lq = testsupport::random_tensor({3, 16, 16}, rng);

    SECTION("16x16 LQ at x4 gives 64x64 output") {
        Tape t(false);
        Tensor out = restore(t, m, lq, id::MaybeFace::absent(), FaceMask::zeros(16, 16)).value();
        REQUIRE(out.shape() == std::vector<int>{3, 64, 64});
        REQUIRE(out.min() >= 0.0);
        REQUIRE(out.max() <= 1.0);
    }

    SECTION("absent reference equals an explicit zero reference latent") {
        Tape t(false);
        Tensor via_absent =
            restore(t, m, lq, id::MaybeFace::absent(), FaceMask::zeros(16, 16)).value();

        // Manual pipeline with an explicit zero latent.
        Tape t2(false);
        Tensor up = img::resize(lq, 64, 64, img::Resample::kBicubic);
        Var z_l = m.encoder.forward(t2, Var::constant(up));
        Var z_r = Var::constant(Tensor::zeros({4, 8, 8}));
        auto predictor = [&](const Var& cat) {
            return m.unet.forward(t2, cat, m.temb_base, m.context);
        };
        Var z_hat =
            denoise_one_step(z_l, z_r, FaceMask::zeros(16, 16), m.scalars(), predictor);
        Tensor manual = ad::clamp(m.decoder.forward(t2, z_hat), 0.0, 1.0).value();
        REQUIRE(max_abs_diff(via_absent, manual) == 0.0);
    }

    SECTION("nonzero mask without reference is a contract violation") {
        FaceMask mask = FaceMask::from_box(16, 16, 4, 4, 9, 9);
        Tape t(false);
        REQUIRE_THROWS_AS(restore(t, m, lq, id::MaybeFace::absent(), mask), ContractViolation);
    }
}

TEST_CASE("restore: zero-init conditioning invariance") {
    ModelConfig cfg;
    Model m = build_model(cfg, 44);
    set_restore_mode(m);
    Rng rng(8);
    Tensor lq = testsupport::random_tensor({3, 16, 16}, rng);

    Tape t0(false);
    Tensor baseline =
        restore(t0, m, lq, id::MaybeFace::absent(), FaceMask::zeros(16, 16)).value();

    for (int i = 0; i < 4; ++i) {
        Tensor ref_img = testsupport::random_tensor({3, 32, 32}, rng);
        double x0 = rng.uniform(0, 8), y0 = rng.uniform(0, 8);
        FaceMask mask = FaceMask::from_box(16, 16, x0, y0, x0 + 6, y0 + 6);
        Tape t(false);
        Tensor out = restore(t, m, lq, id::MaybeFace::of(ref_img), mask).value();
        REQUIRE(max_abs_diff(out, baseline) < 1e-6);
    }
}

TEST_CASE("checkpoint: round trip preserves every array bitwise") {
    ModelConfig cfg;
    Model m = build_model(cfg, 45);
    set_restore_mode(m);
    Discriminator disc = build_discriminator(46);
    // Dirty some optimizer state so the adam arrays round-trip too.
    auto trainables = m.store.trainable();
    REQUIRE_FALSE(trainables.empty());
    trainables[0]->adam_m = Tensor(trainables[0]->value.shape(), 0.25);
    trainables[0]->adam_v = Tensor(trainables[0]->value.shape(), 0.5);
    trainables[0]->adam_step = 7;

    const std::string path = "/tmp/headsup_test_ckpt.bin";
    save_checkpoint(path, m, &disc, {{"step", 123}});

    auto ck = read_checkpoint(path);
    REQUIRE(ck.meta.at("extra").at("step").get<int>() == 123);
    Model m2 = load_model(ck);
    Discriminator d2 = load_discriminator(ck);

    REQUIRE(m2.store.all().size() == m.store.all().size());
    for (size_t i = 0; i < m.store.all().size(); ++i) {
        const auto& a = m.store.all()[i];
        const auto& b = m2.store.all()[i];
        REQUIRE(a->name == b->name);
        REQUIRE(a->trainable == b->trainable);
        REQUIRE(max_abs_diff(a->value, b->value) == 0.0);
    }
    REQUIRE(m2.store.find(trainables[0]->name)->adam_step == 7);
    REQUIRE(m2.store.find(trainables[0]->name)->adam_m.max() == 0.25);
    for (size_t i = 0; i < disc.store.all().size(); ++i)
        REQUIRE(max_abs_diff(disc.store.all()[i]->value, d2.store.all()[i]->value) == 0.0);

    // Same restore output from the reloaded model.
    Rng rng(9);
    Tensor lq = testsupport::random_tensor({3, 16, 16}, rng);
    Tape t1(false), t2(false);
    Tensor o1 = restore(t1, m, lq, id::MaybeFace::absent(), FaceMask::zeros(16, 16)).value();
    Tensor o2 = restore(t2, m2, lq, id::MaybeFace::absent(), FaceMask::zeros(16, 16)).value();
    REQUIRE(max_abs_diff(o1, o2) == 0.0);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint: bad magic rejected") {
    const std::string path = "/tmp/headsup_bad_ckpt.bin";
    {
        std::ofstream f(path);
        f << "not-a-checkpoint\n";
    }
    REQUIRE_THROWS_AS(read_checkpoint(path), IoError);
    std::remove(path.c_str());
}

TEST_CASE("trainable set after restore-mode freeze") {
    ModelConfig cfg;
    Model m = build_model(cfg, 47);
    set_restore_mode(m);
    for (const auto& p : m.store.all()) {
        bool adapter = p->name.find(".lora_") != std::string::npos;
        bool extra = p->name.find(".ext_extra") != std::string::npos;
        REQUIRE(p->trainable == (adapter || extra));
    }
    // The decoder never carries adapters at all.
    for (const auto& p : m.store.all())
        if (p->name.rfind("dec.", 0) == 0) REQUIRE(p->name.find(".lora_") == std::string::npos);
}

TEST_CASE("face mask: boxes, bbox, validation") {
    FaceMask f = FaceMask::from_box(16, 16, 3, 4, 9, 11);
    f.validate();
    REQUIRE(f.any());
    auto bb = f.bbox();
    REQUIRE(bb == std::array<int, 4>{3, 4, 9, 11});
    REQUIRE_FALSE(FaceMask::zeros(8, 8).any());
    FaceMask bad = FaceMask::zeros(4, 4);
    bad.m[0] = 0.5;
    REQUIRE_THROWS_AS(bad.validate(), ContractViolation);
}
