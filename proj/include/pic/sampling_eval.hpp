#pragma once

#include "json.hpp"
#include "pic/training.hpp"

namespace pic {

// Mean perceptual saturation of a full-resolution Lab image, in percent:
// S = C / sqrt(C^2 + L^2) with C = sqrt(a^2 + b^2); black pixels contribute 0.
inline double saturation_percent(const LabImage& img) {
    check(img.factor == 1, "saturation expects full-resolution chroma");
    double acc = 0.0;
    for (std::size_t i = 0; i < img.L.size(); ++i) {
        const double c2 = img.a[i] * img.a[i] + img.b[i] * img.b[i];
        const double denom2 = c2 + img.L[i] * img.L[i];
        if (denom2 > 0.0) acc += std::sqrt(c2 / denom2);
    }
    return 100.0 * acc / static_cast<double>(img.L.size());
}

namespace evaldetail {

// chroma bins at the subsampled resolution -> full-resolution Lab image
// sharing the luminance plane bit-for-bit
inline LabImage merge_sample(const std::vector<double>& L, std::size_t h, std::size_t w, int factor,
                             const std::vector<int>& a_bins, const std::vector<int>& b_bins, int levels) {
    ChromaAlphabet ab{levels};
    LabImage sub = LabImage::make(h, w, factor);
    sub.L = L;
    for (std::size_t i = 0; i < a_bins.size(); ++i) {
        sub.a[i] = ChromaAlphabet::denormalize_a(ab.dequantize(a_bins[i]));
        sub.b[i] = ChromaAlphabet::denormalize_b(ab.dequantize(b_bins[i]));
    }
    auto full = upsample_chroma(sub, UpsampleMode::Bilinear);
    full.L = L;  // luminance is never altered
    return full;
}

}  // namespace evaldetail

struct ColorizationResult {
    std::vector<double> input_L;          // [H*W], the preserved luminance plane
    std::size_t height = 0, width = 0;
    std::vector<LabImage> samples;        // one per seed index, factor 1
    std::vector<std::vector<int>> a_bins, b_bins;  // drawn bins at chroma resolution
    std::vector<double> nll_nats;         // joint NLL of each sample
    std::vector<double> saturation_pct;   // per sample
};

// Draws n independent colorizations of a grayscale input. Sample i uses the
// stream derived from (seed, "colorize", i), so individual samples are
// reproducible in isolation.
template <class T>
ColorizationResult colorize(ColorModel<T>& model, ParameterStore<T>& store, const ImageU8& gray,
                            int n_samples, std::uint64_t seed, bool use_shadow = true) {
    const auto f = static_cast<std::size_t>(model.config().subsample);
    if (gray.height % f != 0 || gray.width % f != 0)
        fail_shape("colorize: input ", gray.width, "x", gray.height, " not divisible by the subsample factor ",
                   f, "; pad to ", ((gray.width + f - 1) / f) * f, "x", ((gray.height + f - 1) / f) * f);
    auto lab = gray_to_lab(gray);

    ColorizationResult res;
    res.height = gray.height;
    res.width = gray.width;
    res.input_L = lab.L;
    auto lum = normalize_luminance<T>(lab.L, 1, gray.height, gray.width);
    for (int i = 0; i < n_samples; ++i) {
        Rng rng(derive_seed(seed, "colorize", static_cast<std::uint64_t>(i)));
        auto draw = model.sample_sequential(store, lum, rng, use_shadow);
        auto img = evaldetail::merge_sample(lab.L, gray.height, gray.width, model.config().subsample,
                                            draw.a_bins, draw.b_bins, model.config().levels);
        res.nll_nats.push_back(draw.nll_nats);
        res.saturation_pct.push_back(saturation_percent(img));
        res.samples.push_back(std::move(img));
        res.a_bins.push_back(std::move(draw.a_bins));
        res.b_bins.push_back(std::move(draw.b_bins));
    }
    return res;
}

struct EvalReport {
    std::string dataset_id;
    std::size_t n_images = 0;
    std::size_t n_dims = 0;
    double total_nats = 0.0;
    double bpd = 0.0;
    double mean_saturation_pct = 0.0;
    std::uint64_t config_hash = 0;
    std::string weights_variant;  // "raw" | "polyak"

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["dataset_id"] = dataset_id;
        j["n_images"] = n_images;
        j["n_dims"] = n_dims;
        j["total_nats"] = total_nats;
        j["bits_per_dim"] = bpd;
        j["mean_saturation_pct"] = mean_saturation_pct;
        j["config_hash"] = config_hash;
        j["weights_variant"] = weights_variant;
        return j;
    }
};

inline EvalReport make_report(const std::string& dataset_id, std::size_t n_images, double total_nats,
                              std::size_t n_dims, double mean_saturation, std::uint64_t config_hash,
                              const std::string& variant) {
    EvalReport r;
    r.dataset_id = dataset_id;
    r.n_images = n_images;
    r.n_dims = n_dims;
    r.total_nats = total_nats;
    r.bpd = bits_per_dim(total_nats, n_dims);
    r.mean_saturation_pct = mean_saturation;
    r.config_hash = config_hash;
    r.weights_variant = variant;
    return r;
}

struct PerImageEval {
    std::string id;
    double nats = 0.0;
    double bpd = 0.0;
    double saturation_pct = 0.0;  // of the ground-truth image
};

// Teacher-forced bits/dim over a dataset split plus the per-image table.
template <class T>
EvalReport evaluate_bpd(ColorModel<T>& model, ParameterStore<T>& store, const Dataset& ds,
                        const std::string& split, std::size_t batch_size, bool use_shadow,
                        std::uint64_t config_hash, std::vector<PerImageEval>* per_image = nullptr) {
    auto idx = ds.split_indices(split);
    check(!idx.empty(), "evaluate_bpd: empty split " + split);
    auto [nats, dims] = teacher_forced_nats(model, store, ds, idx, batch_size, use_shadow);
    double sat = 0.0;
    for (std::size_t i : idx) sat += saturation_percent(rgb_to_lab(ds.images[i]));
    sat /= static_cast<double>(idx.size());
    auto report = make_report(ds.manifest.root + "/" + split, idx.size(), nats, dims, sat, config_hash,
                              use_shadow ? "polyak" : "raw");
    if (per_image) {
        const std::size_t per_dims = dims / idx.size();
        for (std::size_t i : idx) {
            auto [inats, idims] = teacher_forced_nats(model, store, ds, {i}, 1, use_shadow);
            PerImageEval row;
            row.id = ds.manifest.entries[i].id;
            row.nats = inats;
            row.bpd = bits_per_dim(inats, per_dims);
            row.saturation_pct = saturation_percent(rgb_to_lab(ds.images[i]));
            per_image->push_back(row);
        }
    }
    return report;
}

// The autoregressive-ablation decoder: per-pixel exact MAP from the
// embedding-only variant; there is no sampling because the pixelwise
// distributions are independent.
template <class T>
LabImage map_colorize_embedding_only(ColorModel<T>& model, ParameterStore<T>& store, const ImageU8& gray,
                                     bool use_shadow = true) {
    check(model.kind() == ModelKind::EmbeddingOnly,
          "map_colorize_embedding_only requires the embedding-only ablation variant");
    const auto f = static_cast<std::size_t>(model.config().subsample);
    check(gray.height % f == 0 && gray.width % f == 0, "input resolution not divisible by factor");
    auto lab = gray_to_lab(gray);
    auto lum = normalize_luminance<T>(lab.L, 1, gray.height, gray.width);

    Tape<T> tape;
    ParamBinder<T> pb(tape, store, use_shadow, false);
    ArrayND<T> no_ctx({1, 2, gray.height / f, gray.width / f});
    auto params = model.forward_params(pb, lum, no_ctx);
    const Shape ps = params.shape();
    std::vector<double> field(params.cvalue().begin(), params.cvalue().end());

    std::vector<int> a_bins(ps[2] * ps[3]), b_bins(ps[2] * ps[3]);
    for (std::size_t y = 0; y < ps[2]; ++y)
        for (std::size_t x = 0; x < ps[3]; ++x) {
            auto pm = extract_pixel(field, ps, 0, y, x, model.config().mixture_components);
            auto [ab_, bb_] = map_estimate(pm, MapMode::Exact, model.config().levels);
            a_bins[y * ps[3] + x] = ab_;
            b_bins[y * ps[3] + x] = bb_;
        }
    return evaldetail::merge_sample(lab.L, gray.height, gray.width, model.config().subsample, a_bins,
                                    b_bins, model.config().levels);
}

// Fixed 4-column montage of equally sized RGB tiles.
inline ImageU8 make_montage(const std::vector<ImageU8>& tiles, std::size_t columns = 4) {
    check(!tiles.empty(), "montage needs at least one tile");
    const std::size_t tw = tiles[0].width, th = tiles[0].height;
    for (const auto& t : tiles) check(t.width == tw && t.height == th && t.channels == 3, "montage tiles must match");
    const std::size_t cols = std::min(columns, tiles.size());
    const std::size_t rows = (tiles.size() + cols - 1) / cols;
    ImageU8 out(cols * tw, rows * th, 3);
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        const std::size_t r = i / cols, c = i % cols;
        for (std::size_t y = 0; y < th; ++y)
            for (std::size_t x = 0; x < tw; ++x)
                for (std::size_t ch = 0; ch < 3; ++ch)
                    out.at(r * th + y, c * tw + x, ch) = tiles[i].at(y, x, ch);
    }
    return out;
}

// --- ablation driver -------------------------------------------------------

struct AblateOutcome {
    EvalReport gated, ungated, embedding_only;
    double full_sample_saturation_pct = 0.0;  // stochastic samples, gated model
    double embonly_map_saturation_pct = 0.0;  // MAP decodes, ablation model
    std::size_t params_gated = 0, params_ungated = 0, params_embonly = 0;
    std::uint64_t permutation_hash = 0;  // shared by all variants
    bool identical_data_order = false;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["gated"] = gated.to_json();
        j["ungated"] = ungated.to_json();
        j["embedding_only"] = embedding_only.to_json();
        j["full_sample_saturation_pct"] = full_sample_saturation_pct;
        j["embonly_map_saturation_pct"] = embonly_map_saturation_pct;
        j["param_count"] = {{"gated", params_gated},
                            {"ungated", params_ungated},
                            {"embedding_only", params_embonly},
                            {"gate_half_delta", params_gated - params_ungated}};
        j["permutation_hash"] = permutation_hash;
        j["identical_data_order"] = identical_data_order;
        return j;
    }
};

// Trains the gated, ungated and embedding-only variants with identical seed
// and data order, evaluates each, and compares sample saturation of the full
// model against the embedding-only MAP decodes.
template <class T>
AblateOutcome ablate(const ModelConfig& base, const TrainConfig& tc, const Dataset& ds,
                     const std::string& out_dir, std::uint64_t config_hash, std::size_t n_sat_images = 8) {
    AblateOutcome out;
    namespace fs = std::filesystem;

    ModelConfig gated_cfg = base;
    gated_cfg.kind = ModelKind::Full;
    gated_cfg.gating = true;
    ModelConfig ungated_cfg = gated_cfg;
    ungated_cfg.gating = false;
    ModelConfig emb_cfg = gated_cfg;
    emb_cfg.kind = ModelKind::EmbeddingOnly;

    Trainer<T> gated(gated_cfg, tc, config_hash);
    Trainer<T> ungated(ungated_cfg, tc, config_hash);
    Trainer<T> embonly(emb_cfg, tc, config_hash);
    out.params_gated = gated.store().total_values();
    out.params_ungated = ungated.store().total_values();
    out.params_embonly = embonly.store().total_values();

    auto rg = gated.train(ds, out_dir.empty() ? "" : (fs::path(out_dir) / "gated").string());
    auto ru = ungated.train(ds, out_dir.empty() ? "" : (fs::path(out_dir) / "ungated").string());
    auto re = embonly.train(ds, out_dir.empty() ? "" : (fs::path(out_dir) / "embonly").string());
    out.permutation_hash = rg.permutation_hash_epoch0;
    out.identical_data_order = rg.permutation_hash_epoch0 == ru.permutation_hash_epoch0 &&
                               rg.permutation_hash_epoch0 == re.permutation_hash_epoch0;

    const std::string eval_split = rg.eval_split;
    const bool shadow = tc.eval_with_polyak;
    out.gated = evaluate_bpd(gated.model(), gated.store(), ds, eval_split, tc.batch_size, shadow,
                             config_hash);
    out.ungated = evaluate_bpd(ungated.model(), ungated.store(), ds, eval_split, tc.batch_size, shadow,
                               config_hash);
    out.embedding_only = evaluate_bpd(embonly.model(), embonly.store(), ds, eval_split, tc.batch_size,
                                      shadow, config_hash);

    // saturation pair on shared evaluation images; untempered samples with
    // per-image derived seeds
    auto idx = ds.split_indices(eval_split);
    idx.resize(std::min(idx.size(), n_sat_images));
    double full_sat = 0.0, emb_sat = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const ImageU8& img = ds.images[idx[i]];
        ImageU8 gray(img.width, img.height, 1);
        auto lab = rgb_to_lab(img);
        for (std::size_t p = 0; p < lab.L.size(); ++p)
            gray.pixels[p] = (std::uint8_t)std::lround(lab.L[p] / 100.0 * 255.0);
        auto res = colorize(gated.model(), gated.store(), gray, 1,
                            derive_seed(tc.seed, "ablate-saturation", i), shadow);
        full_sat += res.saturation_pct[0];
        emb_sat += saturation_percent(map_colorize_embedding_only(embonly.model(), embonly.store(), gray,
                                                                  shadow));
    }
    out.full_sample_saturation_pct = full_sat / (double)idx.size();
    out.embonly_map_saturation_pct = emb_sat / (double)idx.size();

    if (!out_dir.empty()) {
        std::ofstream f(fs::path(out_dir) / "ablate_report.json");
        f << out.to_json().dump(2) << "\n";
    }
    return out;
}

}  // namespace pic
