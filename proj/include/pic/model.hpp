#pragma once

#include "pic/embedding_net.hpp"
#include "pic/pixelcnn.hpp"

namespace pic {

enum class ModelKind { Full, EmbeddingOnly };

struct ModelConfig {
    ModelKind kind = ModelKind::Full;
    std::string embedding_arch = "c32,r32,c64s2,r64,r64d2,c128";  // thinned desk ladder
    int ar_blocks = 3;
    std::size_t ar_channels = 48;
    bool gating = true;
    int mixture_components = 10;
    int levels = 256;
    int subsample = 2;
    bool zero_embedding = false;  // control variant: conditioning forced to zero

    EmbeddingConfig embedding() const { return EmbeddingConfig::parse(embedding_arch); }
};

// Normalizes L in [0,100] to the network input range [-1,1].
template <class T>
inline ArrayND<T> normalize_luminance(const std::vector<double>& L, std::size_t n, std::size_t h,
                                      std::size_t w) {
    ArrayND<T> out({n, 1, h, w});
    check(L.size() == n * h * w, "luminance plane size mismatch");
    for (std::size_t i = 0; i < L.size(); ++i) out.data[i] = static_cast<T>(L[i] / 50.0 - 1.0);
    return out;
}

// The full model: grayscale embedding feeding the causally-masked
// autoregressive network, or the embedding-only ablation variant where a 1x1
// head emits per-pixel mixtures with no chroma context.
template <class T>
class ColorModel {
public:
    ColorModel() = default;

    ColorModel(const ModelConfig& cfg, ParameterStore<T>& store, std::uint64_t init_seed) : cfg_(cfg) {
        EmbeddingConfig emb_cfg = cfg.embedding();
        embedding_ = EmbeddingNet<T>("embedding", emb_cfg, cfg.gating, cfg.subsample);
        if (cfg.kind == ModelKind::Full) {
            ARConfig ar;
            ar.blocks = cfg.ar_blocks;
            ar.channels = cfg.ar_channels;
            ar.gating = cfg.gating;
            ar.mixture_components = cfg.mixture_components;
            ar.cond_channels = emb_cfg.final_width();
            ar_ = ARNet<T>("ar", ar);
        } else {
            head_ = make_nin<T>("head", 2 * emb_cfg.final_width(),
                                6 * static_cast<std::size_t>(cfg.mixture_components));
        }
        Rng rng(derive_seed(init_seed, "model-init"));
        embedding_.register_params(store, rng);
        if (cfg.kind == ModelKind::Full)
            ar_.register_params(store, rng);
        else
            head_->register_params(store, rng);
        store.sync_shadows_to_values();
    }

    const ModelConfig& config() const { return cfg_; }
    ModelKind kind() const { return cfg_.kind; }

    Tensor<T> embed(ParamBinder<T>& pb, const ArrayND<T>& lum_norm) {
        if (cfg_.zero_embedding) {
            // control variant: conditioning forced to zero; the embedding
            // parameters stay registered but receive no gradient
            const auto f = static_cast<std::size_t>(cfg_.subsample);
            const Shape s = {lum_norm.shape[0], cfg_.embedding().final_width(), lum_norm.shape[2] / f,
                             lum_norm.shape[3] / f};
            return pb.tape().leaf(s, std::vector<T>(numel(s), T(0)), false);
        }
        return embedding_.forward(pb, pb.tape().leaf(lum_norm, false));
    }

    // Mixture parameter field [N,6K,h,w]. For the full model chroma_ctx is
    // the causal input (ground truth when teacher forcing, partial canvas
    // when generating); the ablation variant ignores it.
    Tensor<T> forward_params(ParamBinder<T>& pb, const ArrayND<T>& lum_norm, const ArrayND<T>& chroma_ctx) {
        auto emb = embed(pb, lum_norm);
        if (cfg_.kind == ModelKind::Full) return ar_.forward(pb, chroma_ctx, emb);
        return head_->forward(pb, concat_elu(emb));
    }

    // Teacher-forced loss in nats, summed over images and chroma pixels.
    Tensor<T> loss(ParamBinder<T>& pb, const ArrayND<T>& lum_norm, const ArrayND<T>& chroma_ctx,
                   const BatchTargets& targets) {
        auto params = forward_params(pb, lum_norm, chroma_ctx);
        return mixture_nll_total(params, targets, cfg_.mixture_components);
    }

    struct SampleResult {
        std::vector<int> a_bins, b_bins;   // raster order, chroma resolution
        double nll_nats = 0.0;             // accumulated log-prob of this sample
        std::size_t forward_passes = 0;
    };

    // Naive sequential sampling: one full network pass per pixel. The
    // embedding is computed once; causality makes the partial canvas valid.
    SampleResult sample_sequential(ParameterStore<T>& store, const ArrayND<T>& lum_norm, Rng& rng,
                                   bool use_shadow = false) {
        check(cfg_.kind == ModelKind::Full, "sequential sampling needs the autoregressive model");
        check(lum_norm.shape[0] == 1, "sample_sequential works on a single image");
        const auto f = static_cast<std::size_t>(cfg_.subsample);
        const std::size_t h = lum_norm.shape[2] / f, w = lum_norm.shape[3] / f;

        ArrayND<T> emb_vals;
        {
            Tape<T> tape;
            ParamBinder<T> pb(tape, store, use_shadow, false);
            auto emb = embed(pb, lum_norm);
            emb_vals.shape = emb.shape();
            emb_vals.data = emb.cvalue();
        }

        ChromaAlphabet ab{cfg_.levels};
        SampleResult res;
        res.a_bins.assign(h * w, 0);
        res.b_bins.assign(h * w, 0);
        ArrayND<T> canvas({1, 2, h, w});
        for (std::size_t i = 0; i < h * w; ++i) {
            const std::size_t y = i / w, x = i % w;
            Tape<T> tape;
            ParamBinder<T> pb(tape, store, use_shadow, false);
            auto cond = tape.leaf(emb_vals, false);
            auto params = ar_.forward(pb, canvas, cond);
            ++res.forward_passes;
            std::vector<double> field(params.cvalue().begin(), params.cvalue().end());
            auto pm = extract_pixel(field, params.shape(), 0, y, x, cfg_.mixture_components);
            auto [a_bin, b_bin] = sample_mixture(pm, rng, cfg_.levels);
            res.a_bins[i] = a_bin;
            res.b_bins[i] = b_bin;
            res.nll_nats += mixture_nll(pm, a_bin, b_bin, cfg_.levels);
            canvas.at4(0, 0, y, x) = static_cast<T>(ab.dequantize(a_bin));
            canvas.at4(0, 1, y, x) = static_cast<T>(ab.dequantize(b_bin));
        }
        return res;
    }

    ARNet<T>& ar() { return ar_; }
    EmbeddingNet<T>& embedding_net() { return embedding_; }

private:
    ModelConfig cfg_;
    EmbeddingNet<T> embedding_;
    ARNet<T> ar_;
    std::optional<WeightNormConv2d<T>> head_;
};

}  // namespace pic
