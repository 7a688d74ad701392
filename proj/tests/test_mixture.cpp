#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "pic/mixture.hpp"

using namespace pic;
using Catch::Approx;

namespace {

PixelMixture random_mixture(Rng& rng, int k = 10, double ls_lo = -4.0, double ls_hi = 0.0) {
    PixelMixture p(k);
    for (int i = 0; i < k; ++i) {
        const auto u = (std::size_t)i;
        p.wlogit[u] = rng.uniform(-2.0, 2.0);
        p.mu_a[u] = rng.uniform(-1.0, 1.0);
        p.mu_b[u] = rng.uniform(-1.0, 1.0);
        p.ls_a[u] = rng.uniform(ls_lo, ls_hi);
        p.ls_b[u] = rng.uniform(ls_lo, ls_hi);
        p.c_ba[u] = rng.uniform(-0.5, 0.5);
    }
    return p;
}

double grid_sum(const std::vector<double>& g) {
    double s = 0.0;
    for (double v : g) s += v;
    return s;
}

}  // namespace

TEST_CASE("discretized logistic: bin masses sum to one", "[mixture]") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        const double mu = rng.uniform(-1.5, 1.5);
        const double ls = rng.uniform(-5.0, 1.0);
        double s = 0.0;
        for (int bin = 0; bin < 256; ++bin) s += std::exp(num::disc_logistic_logpmf(mu, ls, bin, 256));
        REQUIRE(s == Approx(1.0).margin(1e-10));
    }
}

TEST_CASE("discretized logistic: edge bin absorbs far tails", "[mixture]") {
    for (double ls : {std::log(0.1), std::log(0.01)}) {
        const double p0 = std::exp(num::disc_logistic_logpmf(-5.0, ls, 0, 256));
        REQUIRE(p0 > 0.999);
    }
}

TEST_CASE("discretized logistic: delta limit hits one bin exactly", "[mixture]") {
    ChromaAlphabet ab;
    for (int bin : {1, 77, 200, 254}) {
        const double mu = ab.dequantize(bin);
        const double lp = num::disc_logistic_logpmf(mu, std::log(1e-6), bin, 256);
        REQUIRE(lp == Approx(0.0).margin(1e-12));
        REQUIRE(std::exp(lp) == Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("mixture_nll: single factorized component equals 1-D products", "[mixture]") {
    Rng rng(32);
    PixelMixture p(1);
    p.wlogit[0] = 0.7;  // any logit; a single component normalizes away
    p.mu_a[0] = 0.25;
    p.mu_b[0] = -0.5;
    p.ls_a[0] = -2.0;
    p.ls_b[0] = -1.0;
    p.c_ba[0] = 0.0;
    for (int t = 0; t < 50; ++t) {
        const int a = (int)rng.below(256), b = (int)rng.below(256);
        const double want = -num::disc_logistic_logpmf(0.25, -2.0, a, 256) -
                            num::disc_logistic_logpmf(-0.5, -1.0, b, 256);
        REQUIRE(mixture_nll(p, a, b) == Approx(want).margin(1e-12));
    }
}

TEST_CASE("mixture_nll: equal weights match extended-precision direct sum", "[mixture]") {
    Rng rng(33);
    PixelMixture p = random_mixture(rng);
    for (auto& w : p.wlogit) w = 0.3;  // uniform weights 1/10
    ChromaAlphabet ab;
    for (int t = 0; t < 30; ++t) {
        const int a = (int)rng.below(256), b = (int)rng.below(256);
        long double acc = 0.0L;
        for (int i = 0; i < 10; ++i) {
            const auto u = (std::size_t)i;
            const long double pa = expl((long double)num::disc_logistic_logpmf(
                p.mu_a[u], clamp_log_scale(p.ls_a[u]), a, 256));
            const double mu_bc = p.mu_b[u] + p.c_ba[u] * ab.dequantize(a);
            const long double pb = expl((long double)num::disc_logistic_logpmf(
                mu_bc, clamp_log_scale(p.ls_b[u]), b, 256));
            acc += 0.1L * pa * pb;
        }
        const double want = (double)(-logl(acc));
        REQUIRE(mixture_nll(p, a, b) == Approx(want).margin(1e-10));
    }
}

TEST_CASE("pmf_enumerate: normalization, outer product, two modes", "[mixture]") {
    Rng rng(34);
    {
        auto p = random_mixture(rng);
        auto g = pmf_enumerate(p);
        REQUIRE(grid_sum(g) == Approx(1.0).margin(1e-8));
    }
    {
        PixelMixture p(1);
        p.mu_a[0] = -0.3;
        p.mu_b[0] = 0.6;
        p.ls_a[0] = -2.5;
        p.ls_b[0] = -3.0;
        auto g = pmf_enumerate(p);
        std::vector<double> pa(256), pb(256);
        for (int i = 0; i < 256; ++i) {
            pa[(std::size_t)i] = std::exp(num::disc_logistic_logpmf(-0.3, -2.5, i, 256));
            pb[(std::size_t)i] = std::exp(num::disc_logistic_logpmf(0.6, -3.0, i, 256));
        }
        for (int a = 0; a < 256; a += 17)
            for (int b = 0; b < 256; b += 13)
                REQUIRE(g[(std::size_t)a * 256 + (std::size_t)b] ==
                        Approx(pa[(std::size_t)a] * pb[(std::size_t)b]).margin(1e-12));
    }
    {
        PixelMixture p(2);
        p.wlogit = {std::log(0.6), std::log(0.4)};
        p.mu_a = {-0.6, 0.6};
        p.mu_b = {-0.6, 0.6};
        p.ls_a = {-4.0, -4.0};
        p.ls_b = {-4.0, -4.0};
        p.c_ba = {0.0, 0.0};
        auto g = pmf_enumerate(p);
        // brute-force scan for strict local maxima over the 4-neighborhood,
        // ignoring the numerically flat far tails
        const double peak = *std::max_element(g.begin(), g.end());
        int maxima = 0;
        for (int a = 0; a < 256; ++a)
            for (int b = 0; b < 256; ++b) {
                const double v = g[(std::size_t)a * 256 + (std::size_t)b];
                if (v < 1e-6 * peak) continue;
                auto at = [&](int aa, int bb) {
                    if (aa < 0 || aa >= 256 || bb < 0 || bb >= 256) return -1.0;
                    return g[(std::size_t)aa * 256 + (std::size_t)bb];
                };
                if (v > at(a - 1, b) && v > at(a + 1, b) && v > at(a, b - 1) && v > at(a, b + 1)) ++maxima;
            }
        REQUIRE(maxima == 2);
    }
}

TEST_CASE("mixture_nll is consistent with enumeration", "[mixture]") {
    Rng rng(35);
    for (int t = 0; t < 100; ++t) {
        auto p = random_mixture(rng, 10, -5.0, 0.5);
        auto g = pmf_enumerate(p);
        const int a = (int)rng.below(256), b = (int)rng.below(256);
        const double from_grid = -std::log(g[(std::size_t)a * 256 + (std::size_t)b]);
        REQUIRE(mixture_nll(p, a, b) == Approx(from_grid).margin(1e-10));
    }
}

TEST_CASE("sampling: delta determinism and fixed-seed reproducibility", "[mixture]") {
    ChromaAlphabet ab;
    PixelMixture p(3);
    p.wlogit = {2.0, -5.0, -5.0};
    p.mu_a = {ab.dequantize(40), 0.0, 0.0};
    p.mu_b = {ab.dequantize(200), 0.0, 0.0};
    p.ls_a = {std::log(1e-6), -1.0, -1.0};
    p.ls_b = {std::log(1e-6), -1.0, -1.0};
    p.c_ba = {0.0, 0.0, 0.0};
    // dominant near-delta component: when it is picked the output is fixed
    Rng rng(36);
    int hits = 0;
    for (int i = 0; i < 200; ++i) {
        auto [a, b] = sample_mixture(p, rng);
        if (a == 40 && b == 200) ++hits;
    }
    REQUIRE(hits > 190);  // component weight ~ e^2 / (e^2 + 2 e^-5)

    Rng r1(77), r2(77);
    for (int i = 0; i < 50; ++i) {
        auto s1 = sample_mixture(p, r1);
        auto s2 = sample_mixture(p, r2);
        REQUIRE(s1 == s2);
    }
}

TEST_CASE("sampling: histogram matches enumerated pmf in total variation", "[mixture]") {
    Rng rng(37);
    for (int draw = 0; draw < 5; ++draw) {
        auto p = random_mixture(rng, 10, -7.0, -6.0);  // tight components
        auto g = pmf_enumerate(p);
        std::vector<double> hist(g.size(), 0.0);
        Rng srng(derive_seed(1234, "mixture-tv", (std::uint64_t)draw));
        const int n = 200000;
        for (int i = 0; i < n; ++i) {
            auto [a, b] = sample_mixture(p, srng);
            hist[(std::size_t)a * 256 + (std::size_t)b] += 1.0 / n;
        }
        double tv = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) tv += std::abs(hist[i] - g[i]);
        tv *= 0.5;
        REQUIRE(tv < 0.01);
    }
    {
        // broad scales on a small alphabet exercise the same bound
        Rng prng(38);
        auto p = random_mixture(prng, 10, -2.0, 0.0);
        auto g = pmf_enumerate(p, 8);
        std::vector<double> hist(g.size(), 0.0);
        Rng srng(derive_seed(1234, "mixture-tv-toy", 0));
        const int n = 200000;
        for (int i = 0; i < n; ++i) {
            auto [a, b] = sample_mixture(p, srng, 8);
            hist[(std::size_t)a * 8 + (std::size_t)b] += 1.0 / n;
        }
        double tv = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) tv += std::abs(hist[i] - g[i]);
        REQUIRE(0.5 * tv < 0.01);
    }
}

TEST_CASE("map_estimate: tight component, weighted modes, exact >= fast", "[mixture]") {
    ChromaAlphabet ab;
    {
        PixelMixture p(2);
        p.wlogit = {3.0, -3.0};
        p.mu_a = {ab.dequantize(100), 0.9};
        p.mu_b = {ab.dequantize(60), -0.9};
        p.ls_a = {-6.0, -6.0};
        p.ls_b = {-6.0, -6.0};
        REQUIRE(map_estimate(p, MapMode::Exact) == std::make_pair(100, 60));
        REQUIRE(map_estimate(p, MapMode::Fast) == std::make_pair(100, 60));
    }
    {
        PixelMixture p(2);
        p.wlogit = {std::log(0.6), std::log(0.4)};
        p.mu_a = {-0.5, 0.5};
        p.mu_b = {-0.5, 0.5};
        p.ls_a = {-4.5, -4.5};
        p.ls_b = {-4.5, -4.5};
        auto [a, b] = map_estimate(p, MapMode::Exact);
        REQUIRE(a == ab.quantize(-0.5));
        REQUIRE(b == ab.quantize(-0.5));
    }
    Rng rng(39);
    for (int t = 0; t < 1000; ++t) {
        auto p = random_mixture(rng, 4, -5.0, 0.0);
        auto g = pmf_enumerate(p);
        auto ex = map_estimate(p, MapMode::Exact);
        auto fa = map_estimate(p, MapMode::Fast);
        const double pe = g[(std::size_t)ex.first * 256 + (std::size_t)ex.second];
        const double pf = g[(std::size_t)fa.first * 256 + (std::size_t)fa.second];
        REQUIRE(pe >= pf - 1e-15);
    }
}

TEST_CASE("bits_per_dim: uniform baseline, zero, entropy oracle", "[mixture]") {
    const std::size_t n_pixels = 64;
    REQUIRE(bits_per_dim((double)n_pixels * std::log(65536.0), 2 * n_pixels) == Approx(8.0).margin(1e-12));
    REQUIRE(bits_per_dim(0.0, 10) == 0.0);
    REQUIRE_THROWS(bits_per_dim(1.0, 0));

    Rng rng(40);
    auto p = random_mixture(rng, 10, -4.0, -1.0);
    auto g = pmf_enumerate(p);
    long double h_nats = 0.0L, h_bits = 0.0L;
    for (double v : g)
        if (v > 0.0) {
            h_nats -= (long double)v * logl((long double)v);
            h_bits -= (long double)v * (logl((long double)v) / logl(2.0L));
        }
    REQUIRE(bits_per_dim((double)h_nats, 2) == Approx((double)(h_bits / 2.0L)).margin(1e-9));
}

TEST_CASE("mixture_nll_map: gradients pass finite differences", "[mixture]") {
    Rng rng(41);
    const int k = 3;
    const std::size_t h = 2, w = 2;
    std::vector<int> abins, bbins;
    for (std::size_t i = 0; i < h * w; ++i) {
        abins.push_back((int)rng.below(256));
        bbins.push_back((int)rng.below(256));
    }
    abins[0] = 0;  // include the edge bins
    bbins[1] = 255;
    auto targets = BatchTargets::from_bins(abins, bbins, 256);

    ArrayND<double> params({1, 6 * (std::size_t)k, h, w});
    for (auto& v : params.data) v = rng.uniform(-1.0, 1.0);
    // keep raw log-scales away from the clamp kink
    for (std::size_t c = 3 * k; c < (std::size_t)(5 * k); ++c)
        for (std::size_t i = 0; i < h * w; ++i) params.data[c * h * w + i] = rng.uniform(-4.0, -0.5);

    auto rep = oracle::fd_check(
        [&](Tape<double>& t, std::vector<Tensor<double>>& xs) {
            return mixture_nll_total(xs[0], targets, k);
        },
        {params});
    REQUIRE(rep.max_rel_err < 1e-5);
}

TEST_CASE("mixture_nll_map: agrees with the scalar path per pixel", "[mixture]") {
    Rng rng(42);
    const int k = 10;
    const std::size_t n = 2, h = 3, w = 2;
    ArrayND<double> params({n, 6 * (std::size_t)k, h, w});
    for (auto& v : params.data) v = rng.uniform(-1.5, 1.5);
    std::vector<int> abins, bbins;
    for (std::size_t i = 0; i < n * h * w; ++i) {
        abins.push_back((int)rng.below(256));
        bbins.push_back((int)rng.below(256));
    }
    auto targets = BatchTargets::from_bins(abins, bbins, 256);

    Tape<double> tape;
    auto leaf = tape.leaf(params, false);
    auto map = mixture_nll_map(leaf, targets, k);
    for (std::size_t img = 0; img < n; ++img)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                auto p = extract_pixel(params.data, params.shape, img, y, x, k);
                const std::size_t i = img * h * w + y * w + x;
                const double want = mixture_nll(p, abins[i], bbins[i]);
                REQUIRE(map.cvalue()[i] == Approx(want).margin(1e-12));
            }
}

TEST_CASE("log-scale floor keeps likelihood and gradients finite", "[mixture]") {
    const int k = 2;
    ArrayND<double> params({1, 12, 1, 1});
    Rng rng(43);
    for (auto& v : params.data) v = rng.uniform(-1.0, 1.0);
    for (std::size_t c = 6; c < 10; ++c) params.data[c] = -1e6;  // raw log-scales
    auto targets = BatchTargets::from_bins({128}, {17}, 256);

    Tape<double> tape;
    auto leaf = tape.leaf(params, true);
    auto loss = mixture_nll_total(leaf, targets, k);
    REQUIRE(std::isfinite(loss.cvalue()[0]));
    tape.backward(loss);
    for (double g : tape.grad(leaf).data) REQUIRE(std::isfinite(g));
}
