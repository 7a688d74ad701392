#pragma once

#include <optional>
#include <string>

#include "pic/ops.hpp"
#include "pic/param_store.hpp"

namespace pic {

// Binds store parameters as tape leaves (one leaf per name per tape) and
// assembles the full gradient map after backward. Evaluation can bind the
// Polyak shadows instead of the raw values.
template <class T>
class ParamBinder {
public:
    ParamBinder(Tape<T>& tape, ParameterStore<T>& store, bool use_shadow = false, bool trainable = true)
        : tape_(&tape), store_(&store), shadow_(use_shadow), trainable_(trainable) {}

    Tensor<T> get(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        auto& e = store_->entry(name);
        Tensor<T> leaf = tape_->leaf(shadow_ ? e.shadow : e.value, trainable_);
        bound_.emplace(name, leaf);
        return leaf;
    }

    ParameterStore<T>& store() { return *store_; }
    Tape<T>& tape() { return *tape_; }

    // Gradient for every store entry; parameters outside the graph get zeros.
    std::map<std::string, ArrayND<T>> grads() {
        std::map<std::string, ArrayND<T>> out;
        for (const auto& [name, e] : store_->entries()) {
            auto it = bound_.find(name);
            if (it == bound_.end())
                out.emplace(name, ArrayND<T>(e.value.shape));
            else
                out.emplace(name, tape_->grad(it->second));
        }
        return out;
    }

    // data-dependent init pass marker (first training batch)
    bool init_mode = false;

private:
    Tape<T>* tape_;
    ParameterStore<T>* store_;
    bool shadow_, trainable_;
    std::map<std::string, Tensor<T>> bound_;
};

// Weight-normalized convolution: W = g * v / ||v|| per output channel.
// Gains and biases come from data-dependent initialization on the first
// batch unless the layer is zero-initialized (residual second convs).
template <class T>
class WeightNormConv2d {
public:
    WeightNormConv2d() = default;
    WeightNormConv2d(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t kh, std::size_t kw,
                     ConvAttrs attrs, bool zero_init = false)
        : name_(std::move(name)), in_ch_(in_ch), out_ch_(out_ch), kh_(kh), kw_(kw), attrs_(attrs),
          zero_init_(zero_init) {}

    void register_params(ParameterStore<T>& store, Rng& rng) {
        store.create(name_ + ".v", {out_ch_, in_ch_, kh_, kw_});
        store.fill_normal(name_ + ".v", rng, T(0.05));
        store.create(name_ + ".g", {out_ch_}).fill(zero_init_ ? T(0) : T(1));
        store.create(name_ + ".b", {out_ch_});
        store.entry(name_ + ".g").skip_data_init = zero_init_;
    }

    Tensor<T> forward(ParamBinder<T>& pb, const Tensor<T>& x) {
        if (pb.init_mode && !zero_init_) data_dependent_init(pb.store(), x);
        auto v = pb.get(name_ + ".v");
        {
            const auto& vv = v.cvalue();
            const std::size_t per = in_ch_ * kh_ * kw_;
            for (std::size_t o = 0; o < out_ch_; ++o) {
                T n2 = T(0);
                for (std::size_t i = 0; i < per; ++i) n2 += vv[o * per + i] * vv[o * per + i];
                check(n2 > T(0), "weight_norm: zero-norm direction in " + name_);
            }
        }
        auto g = pb.get(name_ + ".g");
        auto b = pb.get(name_ + ".b");
        auto norm2 = reduce_sum(mul(v, v), {1, 2, 3});                        // [Co,1,1,1]
        auto scale = mul(reshape(g, {out_ch_, 1, 1, 1}), rsqrt_op(norm2));    // g / ||v||
        auto w = mul(v, scale);
        return conv2d(x, w, b, attrs_);
    }

    const std::string& name() const { return name_; }
    std::size_t out_channels() const { return out_ch_; }

private:
    // Sets g, b so this layer's pre-activations have per-channel mean 0 and
    // variance 1 on the given input values.
    void data_dependent_init(ParameterStore<T>& store, const Tensor<T>& x) {
        auto& v = store.value(name_ + ".v");
        ArrayND<T> w = v;
        const std::size_t per = in_ch_ * kh_ * kw_;
        for (std::size_t o = 0; o < out_ch_; ++o) {
            T n2 = T(0);
            for (std::size_t i = 0; i < per; ++i) n2 += w.data[o * per + i] * w.data[o * per + i];
            check(n2 > T(0), "weight_norm init: zero-norm direction in " + name_);
            const T inv = T(1) / std::sqrt(n2);
            for (std::size_t i = 0; i < per; ++i) w.data[o * per + i] *= inv;
        }
        Tape<T> probe;
        auto out = conv2d(probe.leaf(x.shape(), x.cvalue(), false), probe.leaf(w, false),
                          probe.leaf(ArrayND<T>({out_ch_}), false), attrs_);
        const Shape os = out.shape();
        const auto& ov = out.cvalue();
        const std::size_t hw = os[2] * os[3];
        const T count = T(os[0] * hw);
        auto& gs = store.value(name_ + ".g");
        auto& bs = store.value(name_ + ".b");
        for (std::size_t c = 0; c < out_ch_; ++c) {
            T mean = T(0);
            for (std::size_t n = 0; n < os[0]; ++n)
                for (std::size_t i = 0; i < hw; ++i) mean += ov[(n * out_ch_ + c) * hw + i];
            mean /= count;
            T var = T(0);
            for (std::size_t n = 0; n < os[0]; ++n)
                for (std::size_t i = 0; i < hw; ++i) {
                    const T d = ov[(n * out_ch_ + c) * hw + i] - mean;
                    var += d * d;
                }
            var /= count;
            const T scale = T(1) / std::sqrt(var + T(1e-10));
            gs.data[c] = scale;
            bs.data[c] = -mean * scale;
        }
    }

    std::string name_;
    std::size_t in_ch_ = 0, out_ch_ = 0, kh_ = 0, kw_ = 0;
    ConvAttrs attrs_;
    bool zero_init_ = false;
};

template <class T>
WeightNormConv2d<T> make_nin(const std::string& name, std::size_t in_ch, std::size_t out_ch,
                             bool zero_init = false) {
    return WeightNormConv2d<T>(name, in_ch, out_ch, 1, 1, ConvAttrs{1, 1, PadSpec::valid()}, zero_init);
}

// Convolution geometry used inside residual blocks. The shifted variants
// pad so outputs only read inputs at or before their own raster position.
enum class BlockConv {
    Plain3x3,          // same padding, optional dilation on the first conv
    DownShifted2x3,    // reads rows r-1..r, cols c-1..c+1
    DownRightShifted2x2,  // reads rows r-1..r, cols c-1..c
};

namespace layerdetail {

inline ConvAttrs block_conv_attrs(BlockConv kind, int dilation) {
    switch (kind) {
        case BlockConv::Plain3x3:
            return ConvAttrs{1, dilation, PadSpec::same()};
        case BlockConv::DownShifted2x3:
            return ConvAttrs{1, 1, PadSpec::explicit_pad(1, 0, 1, 1)};
        case BlockConv::DownRightShifted2x2:
            return ConvAttrs{1, 1, PadSpec::explicit_pad(1, 0, 1, 0)};
    }
    return {};
}

inline std::pair<std::size_t, std::size_t> block_conv_kernel(BlockConv kind) {
    switch (kind) {
        case BlockConv::Plain3x3:
            return {3, 3};
        case BlockConv::DownShifted2x3:
            return {2, 3};
        case BlockConv::DownRightShifted2x2:
            return {2, 2};
    }
    return {3, 3};
}

}  // namespace layerdetail

// Two-convolution residual block with concatenated-ELU nonlinearities,
// sigmoid gating on the second conv's channel halves, an optional auxiliary
// stream input and optional conditioning added to the first conv's output
// through 1x1 projections. The second conv starts zero so the block is an
// exact identity at init.
template <class T>
class GatedResidualBlock {
public:
    struct Spec {
        std::size_t channels = 0;
        bool gating = true;
        int dilation = 1;
        BlockConv conv = BlockConv::Plain3x3;
        std::size_t aux_channels = 0;   // 0 = no auxiliary input
        std::size_t cond_channels = 0;  // 0 = no conditioning
    };

    GatedResidualBlock() = default;
    GatedResidualBlock(std::string name, const Spec& spec) : name_(std::move(name)), spec_(spec) {
        auto [kh, kw] = layerdetail::block_conv_kernel(spec.conv);
        auto attrs1 = layerdetail::block_conv_attrs(spec.conv, spec.dilation);
        auto attrs2 = layerdetail::block_conv_attrs(spec.conv, 1);
        const std::size_t c = spec.channels;
        conv1_ = WeightNormConv2d<T>(name_ + ".conv1", 2 * c, c, kh, kw, attrs1);
        conv2_ = WeightNormConv2d<T>(name_ + ".conv2", 2 * c, spec.gating ? 2 * c : c, kh, kw, attrs2,
                                     /*zero_init=*/true);
        if (spec.aux_channels > 0) aux_nin_ = make_nin<T>(name_ + ".aux", 2 * spec.aux_channels, c);
        if (spec.cond_channels > 0) cond_nin_ = make_nin<T>(name_ + ".cond", spec.cond_channels, c);
    }

    void register_params(ParameterStore<T>& store, Rng& rng) {
        conv1_.register_params(store, rng);
        conv2_.register_params(store, rng);
        if (aux_nin_) aux_nin_->register_params(store, rng);
        if (cond_nin_) cond_nin_->register_params(store, rng);
    }

    Tensor<T> forward(ParamBinder<T>& pb, const Tensor<T>& x, std::optional<Tensor<T>> aux = {},
                      std::optional<Tensor<T>> cond = {}) {
        const Shape& xs = x.shape();
        check(xs.size() == 4 && xs[1] == spec_.channels,
              name_ + ": expected " + std::to_string(spec_.channels) + " channels, got " + shape_str(xs));
        check(aux.has_value() == (spec_.aux_channels > 0), name_ + ": auxiliary input mismatch");
        check(cond.has_value() == (spec_.cond_channels > 0), name_ + ": conditioning input mismatch");

        auto c1 = conv1_.forward(pb, concat_elu(x));
        if (aux) c1 = add(c1, aux_nin_->forward(pb, concat_elu(*aux)));
        if (cond) c1 = add(c1, cond_nin_->forward(pb, *cond));
        auto c2 = conv2_.forward(pb, concat_elu(c1));
        const std::size_t c = spec_.channels;
        if (spec_.gating) {
            auto val = slice_channels(c2, 0, c);
            auto gate = sigmoid_op(slice_channels(c2, c, 2 * c));
            return add(x, mul(val, gate));
        }
        return add(x, c2);
    }

    const Spec& spec() const { return spec_; }

private:
    std::string name_;
    Spec spec_;
    WeightNormConv2d<T> conv1_, conv2_;
    std::optional<WeightNormConv2d<T>> aux_nin_, cond_nin_;
};

}  // namespace pic
