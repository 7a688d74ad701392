#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "pic/layers.hpp"

namespace pic {

// Feed-forward grayscale embedding: a ladder of (strided) weight-normalized
// convolutions and gated residual blocks, expressed as data so both Table-1
// columns and thinned desk configs are plain config strings.
struct EmbeddingLayerSpec {
    bool is_res = false;
    std::size_t width = 0;
    int stride = 1;    // conv layers only
    int dilation = 1;  // residual blocks only
};

struct EmbeddingConfig {
    std::vector<EmbeddingLayerSpec> layers;

    // Grammar: comma-separated "c<width>[s<stride>]" and "r<width>[d<dilation>]",
    // e.g. "c32,r32,c64s2,r64,c128,r128d2,c128".
    static EmbeddingConfig parse(const std::string& arch) {
        EmbeddingConfig cfg;
        std::stringstream ss(arch);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            while (!tok.empty() && tok.front() == ' ') tok.erase(tok.begin());
            while (!tok.empty() && tok.back() == ' ') tok.pop_back();
            check(!tok.empty(), "embedding arch: empty layer token");
            EmbeddingLayerSpec spec;
            spec.is_res = tok[0] == 'r';
            check(tok[0] == 'c' || tok[0] == 'r', "embedding arch: layer must start with c or r: " + tok);
            std::size_t pos = 1;
            std::size_t width = 0;
            while (pos < tok.size() && std::isdigit(static_cast<unsigned char>(tok[pos])))
                width = width * 10 + static_cast<std::size_t>(tok[pos++] - '0');
            check(width > 0, "embedding arch: missing width in token " + tok);
            spec.width = width;
            while (pos < tok.size()) {
                const char tag = tok[pos++];
                std::size_t val = 0;
                while (pos < tok.size() && std::isdigit(static_cast<unsigned char>(tok[pos])))
                    val = val * 10 + static_cast<std::size_t>(tok[pos++] - '0');
                check(val > 0, "embedding arch: bad modifier in token " + tok);
                if (tag == 's') {
                    check(!spec.is_res, "embedding arch: residual blocks cannot stride: " + tok);
                    spec.stride = static_cast<int>(val);
                } else if (tag == 'd') {
                    check(spec.is_res, "embedding arch: dilation applies to residual blocks: " + tok);
                    spec.dilation = static_cast<int>(val);
                } else {
                    check(false, std::string("embedding arch: unknown modifier '") + tag + "' in " + tok);
                }
            }
            cfg.layers.push_back(spec);
        }
        check(!cfg.layers.empty(), "embedding arch: no layers");
        check(!cfg.layers.front().is_res, "embedding arch: first layer must be a convolution");
        std::size_t width = cfg.layers.front().width;
        for (std::size_t i = 1; i < cfg.layers.size(); ++i) {
            if (cfg.layers[i].is_res)
                check(cfg.layers[i].width == width,
                      "embedding arch: residual width " + std::to_string(cfg.layers[i].width) +
                          " does not match running width " + std::to_string(width));
            else
                width = cfg.layers[i].width;
        }
        return cfg;
    }

    int stride_product() const {
        int p = 1;
        for (const auto& l : layers)
            if (!l.is_res) p *= l.stride;
        return p;
    }

    std::size_t final_width() const {
        std::size_t w = 0;
        for (const auto& l : layers) w = l.width;
        return w;
    }
};

// Table-1-style text summary for auditing an architecture.
inline std::string describe_embedding(const EmbeddingConfig& cfg, std::size_t input_res) {
    std::ostringstream os;
    os << "Operation        Res.  Width  D\n";
    std::size_t res = input_res;
    for (const auto& l : cfg.layers) {
        if (l.is_res) {
            os << "Resid. block     " << res << "    " << l.width << "    "
               << (l.dilation > 1 ? std::to_string(l.dilation) : "-") << "\n";
        } else {
            res = (res + static_cast<std::size_t>(l.stride) - 1) / static_cast<std::size_t>(l.stride);
            os << "Conv. 3x3/" << l.stride << "      " << res << "    " << l.width << "    -\n";
        }
    }
    return os.str();
}

template <class T>
class EmbeddingNet {
public:
    EmbeddingNet() = default;
    EmbeddingNet(std::string name, const EmbeddingConfig& cfg, bool gating, int expect_factor)
        : name_(std::move(name)), cfg_(cfg) {
        check(cfg.stride_product() == expect_factor,
              "embedding stride product " + std::to_string(cfg.stride_product()) +
                  " does not match chroma subsample factor " + std::to_string(expect_factor));
        std::size_t width = 1;  // luminance input
        std::size_t ci = 0, ri = 0;
        for (const auto& l : cfg.layers) {
            if (l.is_res) {
                typename GatedResidualBlock<T>::Spec spec;
                spec.channels = l.width;
                spec.gating = gating;
                spec.dilation = l.dilation;
                spec.conv = BlockConv::Plain3x3;
                blocks_.emplace_back(name_ + ".res" + std::to_string(ri++), spec);
                order_.push_back(-static_cast<int>(blocks_.size()));
            } else {
                convs_.emplace_back(name_ + ".conv" + std::to_string(ci++), width, l.width, 3, 3,
                                    ConvAttrs{l.stride, 1, PadSpec::same()});
                order_.push_back(static_cast<int>(convs_.size()));
                width = l.width;
            }
        }
    }

    void register_params(ParameterStore<T>& store, Rng& rng) {
        for (auto& c : convs_) c.register_params(store, rng);
        for (auto& b : blocks_) b.register_params(store, rng);
    }

    // lum: [N,1,H,W] in [-1,1]; output: [N, final_width, H/f, W/f]
    Tensor<T> forward(ParamBinder<T>& pb, const Tensor<T>& lum) {
        const Shape s = lum.shape();
        check(s.size() == 4 && s[1] == 1, "embedding input must be [N,1,H,W], got " + shape_str(s));
        const auto f = static_cast<std::size_t>(cfg_.stride_product());
        check(s[2] % f == 0 && s[3] % f == 0,
              "embedding input " + shape_str(s) + " not divisible by factor " + std::to_string(f));
        Tensor<T> x = lum;
        for (int idx : order_) {
            if (idx > 0)
                x = convs_[static_cast<std::size_t>(idx - 1)].forward(pb, x);
            else
                x = blocks_[static_cast<std::size_t>(-idx - 1)].forward(pb, x);
        }
        return x;
    }

    const EmbeddingConfig& config() const { return cfg_; }

private:
    std::string name_;
    EmbeddingConfig cfg_;
    std::vector<WeightNormConv2d<T>> convs_;
    std::vector<GatedResidualBlock<T>> blocks_;
    std::vector<int> order_;  // >0: convs_[i-1], <0: blocks_[-i-1]
};

}  // namespace pic
