#include <catch2/catch_amalgamated.hpp>

#include "pic/sampling_eval.hpp"

using namespace pic;
using Catch::Approx;

namespace {

ImageU8 synth_image(std::size_t res, std::uint64_t seed) {
    Rng rng(seed);
    ImageU8 img(res, res, 3);
    const double phase = rng.uniform(0.0, 6.28);
    for (std::size_t y = 0; y < res; ++y)
        for (std::size_t x = 0; x < res; ++x) {
            const double t = std::sin(0.9 * x + phase) + std::cos(0.7 * y);
            img.at(y, x, 0) = (std::uint8_t)std::lround(127.0 + 90.0 * std::sin(t));
            img.at(y, x, 1) = (std::uint8_t)std::lround(127.0 + 90.0 * std::cos(t + phase));
            img.at(y, x, 2) = (std::uint8_t)std::lround(127.0 + 70.0 * std::sin(t * 1.7));
        }
    return img;
}

ModelConfig toy_model_config() {
    ModelConfig mc;
    mc.embedding_arch = "c8,c16s2";
    mc.ar_blocks = 1;
    mc.ar_channels = 16;
    mc.mixture_components = 4;
    mc.subsample = 2;
    return mc;
}

// a lightly trained toy model shared by the sampling tests
struct TrainedToy {
    Trainer<double> trainer;
    TrainedToy() : trainer(toy_model_config(), train_cfg(), 9001) {
        std::vector<ImageU8> imgs;
        for (int i = 0; i < 6; ++i) imgs.push_back(synth_image(8, 700 + (std::uint64_t)i));
        auto ds = Dataset::in_memory(std::move(imgs), "toy", 8, 2, 0.0);
        trainer.train(ds, "");
    }
    static TrainConfig train_cfg() {
        TrainConfig tc;
        tc.batch_size = 6;
        tc.max_iterations = 40;
        tc.lr_decay = 1.0;
        tc.grad_audit = false;
        return tc;
    }
};

TrainedToy& trained_toy() {
    static TrainedToy t;
    return t;
}

}  // namespace

TEST_CASE("saturation: formula values, homogeneity, bounds", "[eval]") {
    LabImage gray = LabImage::make(4, 4, 1);
    for (auto& v : gray.L) v = 30.0;
    REQUIRE(saturation_percent(gray) == 0.0);

    LabImage one = LabImage::make(1, 1, 1);
    one.L[0] = 50.0;
    one.a[0] = 30.0;
    one.b[0] = 40.0;
    REQUIRE(saturation_percent(one) == Approx(100.0 * 50.0 / std::sqrt(5000.0)).margin(1e-9));

    LabImage two = one;
    two.L[0] = 100.0;
    two.a[0] = 60.0;
    two.b[0] = 80.0;
    REQUIRE(saturation_percent(two) == Approx(saturation_percent(one)).margin(1e-12));

    Rng rng(200);
    for (int t = 0; t < 50; ++t) {
        LabImage img = LabImage::make(2, 2, 1);
        for (auto& v : img.L) v = rng.uniform(0.0, 100.0);
        for (auto& v : img.a) v = rng.uniform(-127.0, 128.0);
        for (auto& v : img.b) v = rng.uniform(-128.0, 127.0);
        const double s = saturation_percent(img);
        REQUIRE(s >= 0.0);
        REQUIRE(s <= 100.0);
    }

    LabImage black = LabImage::make(1, 1, 1);  // L = C = 0 contributes zero
    REQUIRE(saturation_percent(black) == 0.0);
}

TEST_CASE("colorize: seed determinism, luminance preservation, NLL consistency", "[eval]") {
    auto& toy = trained_toy();
    ImageU8 gray(8, 8, 1);
    Rng rng(201);
    for (auto& p : gray.pixels) p = (std::uint8_t)(40 + rng.below(170));

    auto r1 = colorize(toy.trainer.model(), toy.trainer.store(), gray, 2, 555);
    auto r2 = colorize(toy.trainer.model(), toy.trainer.store(), gray, 2, 555);
    REQUIRE(r1.samples[0].a == r2.samples[0].a);
    REQUIRE(r1.samples[1].b == r2.samples[1].b);
    REQUIRE(r1.nll_nats == r2.nll_nats);

    // luminance plane is bit-identical to the input interpretation
    auto lab = gray_to_lab(gray);
    for (const auto& s : r1.samples) REQUIRE(s.L == lab.L);

    // per-sample joint NLL equals the teacher-forced loss of the sampled bins
    ChromaAlphabet ab;
    for (std::size_t s = 0; s < r1.samples.size(); ++s) {
        const auto& abins = r1.a_bins[s];
        const auto& bbins = r1.b_bins[s];
        ArrayND<double> ctx({1, 2, 4, 4});
        for (std::size_t p = 0; p < 16; ++p) {
            ctx.data[p] = ab.dequantize(abins[p]);
            ctx.data[16 + p] = ab.dequantize(bbins[p]);
        }
        auto lum = normalize_luminance<double>(lab.L, 1, 8, 8);
        Tape<double> tape;
        ParamBinder<double> pb(tape, toy.trainer.store(), true, false);
        auto loss = toy.trainer.model().loss(pb, lum, ctx, BatchTargets::from_bins(abins, bbins, 256));
        REQUIRE(loss.cvalue()[0] == Approx(r1.nll_nats[s]).margin(1e-9));
    }
}

TEST_CASE("colorize: distinct seed indices generally differ on a trained toy model", "[eval]") {
    auto& toy = trained_toy();
    ImageU8 gray(8, 8, 1);
    Rng rng(202);
    for (auto& p : gray.pixels) p = (std::uint8_t)(40 + rng.below(170));

    auto res = colorize(toy.trainer.model(), toy.trainer.store(), gray, 10, 556);
    int distinct_pairs = 0;
    for (int i = 1; i < 10; ++i)
        if (res.samples[(std::size_t)i].a != res.samples[0].a ||
            res.samples[(std::size_t)i].b != res.samples[0].b)
            ++distinct_pairs;
    REQUIRE(distinct_pairs > 0);
}

TEST_CASE("colorize: indivisible resolution is rejected with a padding hint", "[eval]") {
    auto& toy = trained_toy();
    ImageU8 gray(7, 8, 1);
    REQUIRE_THROWS_WITH(colorize(toy.trainer.model(), toy.trainer.store(), gray, 1, 1),
                        Catch::Matchers::ContainsSubstring("pad to"));
}

TEST_CASE("eval report: uniform nats give exactly 8 bpd and fields recompute", "[eval]") {
    const std::size_t n_pixels = 16 * 16;
    const double nats = (double)n_pixels * std::log(65536.0);
    auto rep = make_report("synthetic/uniform", 4, nats, 2 * n_pixels, 33.0, 0xabcd, "polyak");
    REQUIRE(rep.bpd == Approx(8.0).margin(1e-6));
    REQUIRE(rep.bpd == Approx(bits_per_dim(rep.total_nats, rep.n_dims)).margin(1e-15));
    auto j = rep.to_json();
    REQUIRE(j["weights_variant"] == "polyak");
    REQUIRE(j["n_dims"] == 2 * n_pixels);
}

TEST_CASE("evaluate_bpd: deterministic, raw vs polyak variants", "[eval]") {
    auto& toy = trained_toy();
    std::vector<ImageU8> imgs;
    for (int i = 0; i < 4; ++i) imgs.push_back(synth_image(8, 900 + (std::uint64_t)i));
    auto ds = Dataset::in_memory(std::move(imgs), "eval", 8, 2, 0.0);

    std::vector<PerImageEval> table;
    auto r1 = evaluate_bpd(toy.trainer.model(), toy.trainer.store(), ds, kTrainSplit, 2, true, 7, &table);
    auto r2 = evaluate_bpd(toy.trainer.model(), toy.trainer.store(), ds, kTrainSplit, 2, true, 7);
    REQUIRE(r1.total_nats == r2.total_nats);  // bit-stable
    REQUIRE(r1.weights_variant == "polyak");
    REQUIRE(table.size() == 4);
    double sum = 0.0;
    for (const auto& row : table) sum += row.nats;
    REQUIRE(sum == Approx(r1.total_nats).margin(1e-9));

    auto raw = evaluate_bpd(toy.trainer.model(), toy.trainer.store(), ds, kTrainSplit, 2, false, 7);
    REQUIRE(raw.weights_variant == "raw");
    REQUIRE(std::isfinite(raw.bpd));
}

TEST_CASE("map_colorize_embedding_only: deterministic, rejects the full model", "[eval]") {
    ModelConfig cfg = toy_model_config();
    cfg.kind = ModelKind::EmbeddingOnly;
    TrainConfig tc;
    tc.batch_size = 4;
    tc.max_iterations = 20;
    tc.grad_audit = false;
    Trainer<double> tr(cfg, tc, 42);
    std::vector<ImageU8> imgs;
    for (int i = 0; i < 4; ++i) imgs.push_back(synth_image(8, 950 + (std::uint64_t)i));
    auto ds = Dataset::in_memory(std::move(imgs), "emb", 8, 2, 0.0);
    tr.train(ds, "");

    ImageU8 gray(8, 8, 1);
    Rng rng(203);
    for (auto& p : gray.pixels) p = (std::uint8_t)(30 + rng.below(190));
    auto m1 = map_colorize_embedding_only(tr.model(), tr.store(), gray);
    auto m2 = map_colorize_embedding_only(tr.model(), tr.store(), gray);
    REQUIRE(m1.a == m2.a);
    REQUIRE(m1.b == m2.b);
    REQUIRE(m1.L == gray_to_lab(gray).L);

    auto& toy = trained_toy();
    REQUIRE_THROWS_WITH(map_colorize_embedding_only(toy.trainer.model(), toy.trainer.store(), gray),
                        Catch::Matchers::ContainsSubstring("embedding-only"));
}

TEST_CASE("map_colorize_embedding_only: pixel responses stay local to the embedding field", "[eval]") {
    ModelConfig cfg = toy_model_config();  // two plain convs: tight receptive field
    cfg.kind = ModelKind::EmbeddingOnly;
    TrainConfig tc;
    tc.batch_size = 2;
    tc.max_iterations = 5;
    tc.grad_audit = false;
    Trainer<double> tr(cfg, tc, 43);
    std::vector<ImageU8> imgs{synth_image(16, 970), synth_image(16, 971)};
    auto ds = Dataset::in_memory(std::move(imgs), "loc", 16, 2, 0.0);
    tr.train(ds, "");

    ImageU8 gray(16, 16, 1);
    Rng rng(204);
    for (auto& p : gray.pixels) p = (std::uint8_t)(30 + rng.below(190));
    auto base = map_colorize_embedding_only(tr.model(), tr.store(), gray);

    ImageU8 bumped = gray;
    bumped.at(8, 8, 0) = (std::uint8_t)(bumped.at(8, 8, 0) ^ 0x40);
    auto got = map_colorize_embedding_only(tr.model(), tr.store(), bumped);

    // conv ladder c8,c16s2 has an input-pixel radius of 3; with the factor-2
    // bilinear upsample halo the change stays inside |dy|,|dx| <= 3+3
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
            if (std::abs((long)y - 8) <= 6 && std::abs((long)x - 8) <= 6) continue;
            REQUIRE(got.a[y * 16 + x] == base.a[y * 16 + x]);
            REQUIRE(got.b[y * 16 + x] == base.b[y * 16 + x]);
        }
}

TEST_CASE("ablate: identical data order, audit counts, machine-readable report", "[eval]") {
    ModelConfig mc = toy_model_config();
    TrainConfig tc;
    tc.batch_size = 4;
    tc.max_iterations = 6;
    tc.grad_audit = false;
    std::vector<ImageU8> imgs;
    for (int i = 0; i < 8; ++i) imgs.push_back(synth_image(8, 980 + (std::uint64_t)i));
    auto ds = Dataset::in_memory(std::move(imgs), "abl", 8, 2, 0.25);

    auto out = ablate<double>(mc, tc, ds, "", 77, 2);
    REQUIRE(out.identical_data_order);
    REQUIRE(out.params_gated > out.params_ungated);  // the gate halves
    REQUIRE(std::isfinite(out.gated.bpd));
    REQUIRE(std::isfinite(out.ungated.bpd));
    REQUIRE(std::isfinite(out.embedding_only.bpd));
    REQUIRE(out.full_sample_saturation_pct >= 0.0);
    REQUIRE(out.embonly_map_saturation_pct >= 0.0);

    auto j = out.to_json();
    REQUIRE(j.contains("gated"));
    REQUIRE(j.contains("ungated"));
    REQUIRE(j["param_count"].contains("gate_half_delta"));
    REQUIRE(j["gated"].contains("bits_per_dim"));
}

TEST_CASE("montage: fixed 4-column layout", "[eval]") {
    std::vector<ImageU8> tiles;
    for (int i = 0; i < 6; ++i) {
        ImageU8 t(4, 4, 3);
        std::fill(t.pixels.begin(), t.pixels.end(), (std::uint8_t)(i * 40));
        tiles.push_back(t);
    }
    auto m = make_montage(tiles, 4);
    REQUIRE(m.width == 16);
    REQUIRE(m.height == 8);
    REQUIRE((int)m.at(0, 0, 0) == 0);
    REQUIRE((int)m.at(0, 15, 0) == 3 * 40);
    REQUIRE((int)m.at(7, 0, 0) == 4 * 40);
}
