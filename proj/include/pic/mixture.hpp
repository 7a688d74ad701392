#pragma once

#include <utility>

#include "pic/colorspace.hpp"
#include "pic/ops.hpp"
#include "pic/rng.hpp"

namespace pic {

// Raw log-scales are floored (and generously ceiled) wherever likelihoods
// are evaluated, so near-delta components stay representable in 64-bit.
constexpr double kLogScaleFloor = -7.0;
constexpr double kLogScaleCeil = 80.0;

inline double clamp_log_scale(double v) {
    return std::min(std::max(v, kLogScaleFloor), kLogScaleCeil);
}

// One pixel's mixture: K weight logits plus per-component (mu, log-scale)
// for both channels and the linear a->b coupling coefficient.
struct PixelMixture {
    std::vector<double> wlogit, mu_a, mu_b, ls_a, ls_b, c_ba;

    explicit PixelMixture(int k = 10)
        : wlogit(k, 0.0), mu_a(k, 0.0), mu_b(k, 0.0), ls_a(k, 0.0), ls_b(k, 0.0), c_ba(k, 0.0) {}

    int k() const { return static_cast<int>(wlogit.size()); }
};

// Channel layout of a 6K-channel parameter field.
struct MixLayout {
    int k = 10;
    std::size_t channels() const { return 6 * static_cast<std::size_t>(k); }
    // offsets: [0,K) weights, [K,2K) mu_a, [2K,3K) mu_b, [3K,4K) ls_a,
    // [4K,5K) ls_b, [5K,6K) coeff
};

inline PixelMixture extract_pixel(const std::vector<double>& field, const Shape& shape, std::size_t n,
                                  std::size_t y, std::size_t x, int k) {
    check(shape.size() == 4 && shape[1] == 6 * static_cast<std::size_t>(k),
          "mixture field must have 6K channels, got " + shape_str(shape));
    PixelMixture p(k);
    const std::size_t hw = shape[2] * shape[3];
    auto at = [&](std::size_t c) { return field[(n * shape[1] + c) * hw + y * shape[3] + x]; };
    for (int i = 0; i < k; ++i) {
        const std::size_t u = static_cast<std::size_t>(i), kk = static_cast<std::size_t>(k);
        p.wlogit[u] = at(u);
        p.mu_a[u] = at(kk + u);
        p.mu_b[u] = at(2 * kk + u);
        p.ls_a[u] = at(3 * kk + u);
        p.ls_b[u] = at(4 * kk + u);
        p.c_ba[u] = at(5 * kk + u);
    }
    return p;
}

namespace mixdetail {

// max-subtracted LSE in index order; the tape op uses the same recipe, which
// keeps the plain path and the graph path in bitwise agreement
inline double lse(const std::vector<double>& v) {
    double m = v[0];
    for (double x : v) m = std::max(m, x);
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

}  // namespace mixdetail

// Teacher-forced negative log-likelihood of one (a,b) bin pair, in nats.
inline double mixture_nll(const PixelMixture& p, int a_bin, int b_bin, int levels = 256) {
    ChromaAlphabet ab{levels};
    const double x_a = ab.dequantize(a_bin);
    const int k = p.k();
    std::vector<double> mix(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        const auto u = static_cast<std::size_t>(i);
        const double lpa = num::disc_logistic_logpmf(p.mu_a[u], clamp_log_scale(p.ls_a[u]), a_bin, levels);
        const double mu_bc = p.mu_b[u] + p.c_ba[u] * x_a;
        const double lpb = num::disc_logistic_logpmf(mu_bc, clamp_log_scale(p.ls_b[u]), b_bin, levels);
        mix[u] = p.wlogit[u] + lpa + lpb;
    }
    return mixdetail::lse(p.wlogit) - mixdetail::lse(mix);
}

// Exact PMF over the full (levels x levels) alphabet, row-major in (a, b);
// grid[a][b] = exp(-mixture_nll(a, b)) by construction.
inline std::vector<double> pmf_enumerate(const PixelMixture& p, int levels = 256) {
    const std::size_t n = static_cast<std::size_t>(levels);
    std::vector<double> grid(n * n);
    for (int a = 0; a < levels; ++a)
        for (int b = 0; b < levels; ++b)
            grid[static_cast<std::size_t>(a) * n + static_cast<std::size_t>(b)] =
                std::exp(-mixture_nll(p, a, b, levels));
    return grid;
}

// Ancestral sample: component, then a, then b | a. Log-scales are taken as
// given here; near-delta tests rely on the unfloored values.
inline std::pair<int, int> sample_mixture(const PixelMixture& p, Rng& rng, int levels = 256) {
    ChromaAlphabet ab{levels};
    const int k = p.k();
    const double lw = mixdetail::lse(p.wlogit);
    const double u = rng.uniform();
    int comp = k - 1;
    double acc = 0.0;
    for (int i = 0; i < k; ++i) {
        acc += std::exp(p.wlogit[static_cast<std::size_t>(i)] - lw);
        if (u < acc) {
            comp = i;
            break;
        }
    }
    const auto c = static_cast<std::size_t>(comp);
    auto draw = [&](double mu, double ls) {
        const double v = rng.uniform_open();
        const double x = mu + std::exp(ls) * (std::log(v) - std::log1p(-v));
        return ab.quantize(std::min(std::max(x, -1.0), 1.0));
    };
    const int a_bin = draw(p.mu_a[c], p.ls_a[c]);
    const double x_a = ab.dequantize(a_bin);
    const int b_bin = draw(p.mu_b[c] + p.c_ba[c] * x_a, p.ls_b[c]);
    return {a_bin, b_bin};
}

enum class MapMode { Exact, Fast };

// Exact mode scans the enumerated grid (ties -> smallest (a,b) pair);
// fast mode quantizes the dominant component's means.
inline std::pair<int, int> map_estimate(const PixelMixture& p, MapMode mode, int levels = 256) {
    ChromaAlphabet ab{levels};
    if (mode == MapMode::Fast) {
        int best = 0;
        for (int i = 1; i < p.k(); ++i)
            if (p.wlogit[static_cast<std::size_t>(i)] > p.wlogit[static_cast<std::size_t>(best)]) best = i;
        const auto c = static_cast<std::size_t>(best);
        const int a_bin = ab.quantize(std::min(std::max(p.mu_a[c], -1.0), 1.0));
        const double x_a = ab.dequantize(a_bin);
        const double mu_bc = p.mu_b[c] + p.c_ba[c] * x_a;
        const int b_bin = ab.quantize(std::min(std::max(mu_bc, -1.0), 1.0));
        return {a_bin, b_bin};
    }
    auto grid = pmf_enumerate(p, levels);
    std::size_t best = 0;
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (grid[i] > grid[best]) best = i;
    return {static_cast<int>(best / static_cast<std::size_t>(levels)),
            static_cast<int>(best % static_cast<std::size_t>(levels))};
}

inline double bits_per_dim(double total_nll_nats, std::size_t n_chroma_dims) {
    check(n_chroma_dims > 0, "bits_per_dim: dimension count must be positive");
    return total_nll_nats / (std::log(2.0) * static_cast<double>(n_chroma_dims));
}

// --- differentiable batch NLL ------------------------------------------------

// Quantized chroma targets for a batch at the subsampled resolution.
struct BatchTargets {
    std::shared_ptr<MixTargets> a = std::make_shared<MixTargets>();
    std::shared_ptr<MixTargets> b = std::make_shared<MixTargets>();

    static BatchTargets from_bins(const std::vector<int>& a_bins, const std::vector<int>& b_bins,
                                  int levels) {
        ChromaAlphabet ab{levels};
        BatchTargets t;
        t.a->levels = levels;
        t.b->levels = levels;
        t.a->bin = a_bins;
        t.b->bin = b_bins;
        t.a->x.reserve(a_bins.size());
        t.b->x.reserve(b_bins.size());
        for (int bin : a_bins) t.a->x.push_back(ab.dequantize(bin));
        for (int bin : b_bins) t.b->x.push_back(ab.dequantize(bin));
        return t;
    }
};

// params: [N, 6K, h, w] -> per-pixel NLL map [N, 1, h, w] in nats.
template <class T>
Tensor<T> mixture_nll_map(const Tensor<T>& params, const BatchTargets& targets, int k) {
    Tape<T>& tape = *params.tape;
    const Shape& s = params.shape();
    check(s.size() == 4 && s[1] == 6 * static_cast<std::size_t>(k),
          "mixture_nll_map: params must have 6K channels, got " + shape_str(s));
    const std::size_t kk = static_cast<std::size_t>(k);
    const std::size_t npix = s[0] * s[2] * s[3];
    check(targets.a->bin.size() == npix && targets.b->bin.size() == npix,
          "mixture_nll_map: target size mismatch");

    auto w = slice_channels(params, 0, kk);
    auto mu_a = slice_channels(params, kk, 2 * kk);
    auto mu_b = slice_channels(params, 2 * kk, 3 * kk);
    auto ls_a = clamp_op(slice_channels(params, 3 * kk, 4 * kk), T(kLogScaleFloor), T(kLogScaleCeil));
    auto ls_b = clamp_op(slice_channels(params, 4 * kk, 5 * kk), T(kLogScaleFloor), T(kLogScaleCeil));
    auto coeff = slice_channels(params, 5 * kk, 6 * kk);

    std::vector<T> xa_vals(targets.a->x.begin(), targets.a->x.end());
    auto x_a = tape.leaf(Shape{s[0], 1, s[2], s[3]}, std::move(xa_vals), false);

    auto lp_a = disc_logistic_logpmf_op(mu_a, ls_a, targets.a);
    auto mu_bc = add(mu_b, mul(coeff, x_a));
    auto lp_b = disc_logistic_logpmf_op(mu_bc, ls_b, targets.b);

    auto mix = add(add(w, lp_a), lp_b);
    return sub(log_sum_exp(w, 1), log_sum_exp(mix, 1));
}

// Scalar total loss: per-image sums first, then across the batch, so batch
// totals decompose exactly into per-image terms.
template <class T>
Tensor<T> mixture_nll_total(const Tensor<T>& params, const BatchTargets& targets, int k) {
    auto map = mixture_nll_map(params, targets, k);
    auto per_image = reduce_sum(map, {1, 2, 3});
    return sum_all(per_image);
}

}  // namespace pic
