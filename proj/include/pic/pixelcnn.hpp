#pragma once

#include <optional>

#include "pic/layers.hpp"
#include "pic/mixture.hpp"

namespace pic {

// Autoregressive network over the subsampled chroma planes. Two streams of
// residual blocks: a vertical stream that sees all rows strictly above and a
// horizontal stream that additionally sees the pixels to the left in the
// current row, linked vertically->horizontally. The first-layer shifts
// guarantee a pixel never sees itself.
struct ARConfig {
    int blocks = 4;              // paper CIFAR value
    std::size_t channels = 160;  // paper CIFAR value
    bool gating = true;
    int mixture_components = 10;
    std::size_t cond_channels = 0;  // embedding width; 0 = unconditional
};

template <class T>
class ARNet {
public:
    ARNet() = default;
    ARNet(std::string name, const ARConfig& cfg) : name_(std::move(name)), cfg_(cfg) {
        check(cfg.blocks >= 1, "ar net needs at least one block");
        check(cfg.channels % 2 == 0, "ar channels must be even (gating splits halves)");
        const std::size_t c = cfg.channels;
        // input = 2 chroma channels + a constant-one channel so the very
        // first pixel's factors are expressible
        u_init_ = WeightNormConv2d<T>(name_ + ".u_init", 3, c, 2, 3,
                                      ConvAttrs{1, 1, PadSpec::explicit_pad(1, 0, 1, 1)});
        ul_init_row_ = WeightNormConv2d<T>(name_ + ".ul_init_row", 3, c, 1, 3,
                                           ConvAttrs{1, 1, PadSpec::explicit_pad(0, 0, 2, 0)});
        ul_init_col_ = WeightNormConv2d<T>(name_ + ".ul_init_col", 3, c, 2, 1,
                                           ConvAttrs{1, 1, PadSpec::explicit_pad(1, 0, 0, 0)});
        for (int i = 0; i < cfg.blocks; ++i) {
            typename GatedResidualBlock<T>::Spec uspec;
            uspec.channels = c;
            uspec.gating = cfg.gating;
            uspec.conv = BlockConv::DownShifted2x3;
            uspec.cond_channels = cfg.cond_channels;
            ublocks_.emplace_back(name_ + ".u" + std::to_string(i), uspec);

            typename GatedResidualBlock<T>::Spec hspec = uspec;
            hspec.conv = BlockConv::DownRightShifted2x2;
            hspec.aux_channels = c;
            ulblocks_.emplace_back(name_ + ".ul" + std::to_string(i), hspec);
        }
        const auto kk = static_cast<std::size_t>(cfg.mixture_components);
        head_ = make_nin<T>(name_ + ".head", 2 * c, 6 * kk);
    }

    void register_params(ParameterStore<T>& store, Rng& rng) {
        u_init_.register_params(store, rng);
        ul_init_row_.register_params(store, rng);
        ul_init_col_.register_params(store, rng);
        for (auto& b : ublocks_) b.register_params(store, rng);
        for (auto& b : ulblocks_) b.register_params(store, rng);
        head_.register_params(store, rng);
    }

    // chroma: [N,2,h,w] in [-1,1] (quantized bin centers, ground truth at
    // training, partial canvas at generation); cond: [N,cond_ch,h,w].
    // Returns the mixture parameter field [N, 6K, h, w].
    Tensor<T> forward(ParamBinder<T>& pb, const ArrayND<T>& chroma, std::optional<Tensor<T>> cond) {
        check(chroma.shape.size() == 4 && chroma.shape[1] == 2,
              "ar forward: chroma must be [N,2,h,w], got " + shape_str(chroma.shape));
        check(cond.has_value() == (cfg_.cond_channels > 0), "ar forward: conditioning mismatch");
        const std::size_t n = chroma.shape[0], h = chroma.shape[2], w = chroma.shape[3];
        if (cond) {
            const Shape cs = cond->shape();
            if (cs != Shape{n, cfg_.cond_channels, h, w})
                fail_shape("ar forward: embedding ", shape_str(cs), " misaligned with chroma ",
                           shape_str(chroma.shape));
        }

        ArrayND<T> input({n, 3, h, w});
        for (std::size_t img = 0; img < n; ++img) {
            std::copy(chroma.data.begin() + static_cast<long>(img * 2 * h * w),
                      chroma.data.begin() + static_cast<long>((img + 1) * 2 * h * w),
                      input.data.begin() + static_cast<long>(img * 3 * h * w));
            std::fill(input.data.begin() + static_cast<long>((img * 3 + 2) * h * w),
                      input.data.begin() + static_cast<long>((img + 1) * 3 * h * w), T(1));
        }
        auto x = pb.tape().leaf(input, false);

        auto u = shift_down(u_init_.forward(pb, x));
        auto ul = add(shift_down(ul_init_row_.forward(pb, x)), shift_right(ul_init_col_.forward(pb, x)));
        for (std::size_t i = 0; i < ublocks_.size(); ++i) {
            u = ublocks_[i].forward(pb, u, {}, cond);
            ul = ulblocks_[i].forward(pb, ul, u, cond);
        }
        return head_.forward(pb, concat_elu(ul));
    }

    const ARConfig& config() const { return cfg_; }

private:
    std::string name_;
    ARConfig cfg_;
    WeightNormConv2d<T> u_init_, ul_init_row_, ul_init_col_, head_;
    std::vector<GatedResidualBlock<T>> ublocks_, ulblocks_;
};

}  // namespace pic
