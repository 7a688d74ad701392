#pragma once

// Invariant suites behind the `selftest` command. Oracles here are compact
// independent re-implementations (naive loops, finite differences, direct
// enumeration); they never call the code paths they are checking.

#include <chrono>
#include <filesystem>
#include <ostream>

#include "pic/checkpoint.hpp"
#include "pic/dataset.hpp"
#include "pic/sampling_eval.hpp"

namespace pic {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

namespace selfdetail {

inline ArrayND<double> random_array(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    ArrayND<double> a(s);
    for (auto& v : a.data) v = rng.uniform(lo, hi);
    return a;
}

// central finite differences of a scalar built from one leaf
template <class Build>
double fd_max_rel_err(const Build& build, ArrayND<double> input, double step = 1e-5) {
    auto eval = [&](const ArrayND<double>& x) {
        Tape<double> t;
        auto leaf = t.leaf(x, true);
        return build(t, leaf).cvalue()[0];
    };
    Tape<double> t;
    auto leaf = t.leaf(input, true);
    auto loss = build(t, leaf);
    t.backward(loss);
    auto grad = t.grad(leaf);
    double worst = 0.0;
    for (std::size_t i = 0; i < input.size(); ++i) {
        const double keep = input.data[i];
        input.data[i] = keep + step;
        const double fp = eval(input);
        input.data[i] = keep - step;
        const double fm = eval(input);
        input.data[i] = keep;
        const double fd = (fp - fm) / (2.0 * step);
        const double ad = grad.data[i];
        worst = std::max(worst, std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)}));
    }
    return worst;
}

// six-nested-loop cross-correlation oracle
inline ArrayND<double> conv_ref(const ArrayND<double>& x, const ArrayND<double>& k, int stride,
                                int dilation, int pt, int pl, std::size_t oh, std::size_t ow) {
    const long h = (long)x.shape[2], w = (long)x.shape[3];
    ArrayND<double> out({x.shape[0], k.shape[0], oh, ow});
    for (std::size_t b = 0; b < x.shape[0]; ++b)
        for (std::size_t o = 0; o < k.shape[0]; ++o)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < x.shape[1]; ++c)
                        for (std::size_t i = 0; i < k.shape[2]; ++i)
                            for (std::size_t j = 0; j < k.shape[3]; ++j) {
                                const long iy = (long)(oy * stride) + (long)i * dilation - pt;
                                const long ix = (long)(ox * stride) + (long)j * dilation - pl;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += x.at4(b, c, (std::size_t)iy, (std::size_t)ix) * k.at4(o, c, i, j);
                            }
                    out.at4(b, o, oy, ox) = acc;
                }
    return out;
}

template <class Fn>
CheckResult timed(const std::string& name, const Fn& fn) {
    CheckResult res;
    res.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        res.detail = fn();
        res.pass = true;
    } catch (const std::exception& e) {
        res.pass = false;
        res.detail = e.what();
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

inline void expect(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

}  // namespace selfdetail

inline std::vector<CheckResult> run_selftest(bool quick, std::ostream* progress = nullptr) {
    using namespace selfdetail;
    std::vector<CheckResult> results;
    auto push = [&](CheckResult r) {
        if (progress)
            (*progress) << (r.pass ? "PASS" : "FAIL") << "  " << r.name << "  (" << r.seconds << "s)"
                        << (r.pass ? "" : "  " + r.detail) << "\n";
        results.push_back(std::move(r));
    };

    push(timed("tensor.gradient_sweep", [&] {
        Rng rng(101);
        const int trials = quick ? 6 : 20;
        double worst = 0.0;
        for (int t = 0; t < trials; ++t) {
            Shape s{1 + rng.below(2), 1 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3)};
            auto probe = random_array(s, rng);
            worst = std::max(worst, fd_max_rel_err(
                                        [&](Tape<double>& tp, Tensor<double>& x) {
                                            auto y = concat_elu(tanh_op(x));
                                            auto z = mul(softplus_op(slice_channels(y, 0, s[1])),
                                                         sigmoid_op(slice_channels(y, s[1], 2 * s[1])));
                                            return sum_all(mul(z, z));
                                        },
                                        probe));
            auto k = random_array({2, s[1], 3, 3}, rng, -0.5, 0.5);
            worst = std::max(worst, fd_max_rel_err(
                                        [&](Tape<double>& tp, Tensor<double>& x) {
                                            auto y = conv2d(x, tp.leaf(k, false),
                                                            tp.leaf(ArrayND<double>({2}), false),
                                                            ConvAttrs{1, 1, PadSpec::same()});
                                            return sum_all(mul(y, y));
                                        },
                                        probe));
        }
        expect(worst < 1e-5, "gradient sweep rel err " + std::to_string(worst));
        return "max rel err " + std::to_string(worst);
    }));

    push(timed("tensor.conv_oracle", [&] {
        Rng rng(102);
        for (int stride : {1, 2})
            for (int dilation : {1, 2}) {
                auto x = random_array({2, 2, 7, 8}, rng);
                auto k = random_array({3, 2, 3, 3}, rng);
                Tape<double> t;
                auto y = conv2d(t.leaf(x), t.leaf(k), t.leaf(ArrayND<double>({3}), false),
                                ConvAttrs{stride, dilation, PadSpec::valid()});
                const Shape os = y.shape();
                auto ref = conv_ref(x, k, stride, dilation, 0, 0, os[2], os[3]);
                for (std::size_t i = 0; i < ref.size(); ++i)
                    expect(std::abs(y.cvalue()[i] - ref.data[i]) < 1e-12, "conv mismatch vs loop oracle");
            }
        return std::string("stride x dilation grid matches the loop oracle");
    }));

    push(timed("pixelcnn.causality_exhaustive", [&] {
        Rng rng(103);
        ARConfig cfg;
        cfg.blocks = 2;
        cfg.channels = 8;
        cfg.cond_channels = 4;
        ParameterStore<double> store;
        ARNet<double> net("ar", cfg);
        net.register_params(store, rng);
        for (auto& [name, e] : store.entries())
            for (auto& v : e.value.data)
                v = (name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0)
                        ? 1.0 + 0.1 * rng.normal()
                        : 0.4 * rng.normal();

        const std::size_t hw = 8;
        ChromaAlphabet ab;
        ArrayND<double> base({1, 2, hw, hw});
        for (auto& v : base.data) v = ab.dequantize((int)rng.below(256));
        ArrayND<double> cond({1, 4, hw, hw});
        for (auto& v : cond.data) v = rng.uniform(-1.0, 1.0);

        auto fwd = [&](const ArrayND<double>& chroma) {
            Tape<double> tape;
            ParamBinder<double> pb(tape, store, false, false);
            return net.forward(pb, chroma, tape.leaf(cond, false)).cvalue();
        };
        const auto ref = fwd(base);
        for (std::size_t j = 0; j < hw * hw; ++j) {
            auto bumped = base;
            bumped.at4(0, 0, j / hw, j % hw) += 0.31;
            bumped.at4(0, 1, j / hw, j % hw) -= 0.17;
            const auto got = fwd(bumped);
            for (std::size_t i = 0; i <= j; ++i) {
                const std::size_t y = i / hw, x = i % hw;
                for (std::size_t c = 0; c < 60; ++c)
                    expect(got[(c * hw + y) * hw + x] == ref[(c * hw + y) * hw + x],
                           "future pixel influenced output " + std::to_string(i));
            }
        }
        return std::string("64 impulse probes, outputs at i <= j bit-identical");
    }));

    push(timed("mixture.pmf_normalization", [&] {
        Rng rng(104);
        const int trials = quick ? 10 : 100;
        for (int t = 0; t < trials; ++t) {
            PixelMixture p(10);
            for (int i = 0; i < 10; ++i) {
                const auto u = (std::size_t)i;
                p.wlogit[u] = rng.uniform(-2.0, 2.0);
                p.mu_a[u] = rng.uniform(-1.0, 1.0);
                p.mu_b[u] = rng.uniform(-1.0, 1.0);
                p.ls_a[u] = rng.uniform(-5.0, 0.5);
                p.ls_b[u] = rng.uniform(-5.0, 0.5);
                p.c_ba[u] = rng.uniform(-0.5, 0.5);
            }
            auto grid = pmf_enumerate(p);
            double s = 0.0;
            for (double v : grid) s += v;
            expect(std::abs(s - 1.0) < 1e-8, "pmf sum " + std::to_string(s));
            const int a = (int)rng.below(256), b = (int)rng.below(256);
            const double nll = mixture_nll(p, a, b);
            expect(std::abs(nll + std::log(grid[(std::size_t)a * 256 + (std::size_t)b])) < 1e-10,
                   "nll/enumeration mismatch");
        }
        return std::to_string(trials) + " random mixtures normalized within 1e-8";
    }));

    push(timed("mixture.sampling_tv", [&] {
        Rng rng(105);
        const int draws = quick ? 1 : 5;
        for (int d = 0; d < draws; ++d) {
            PixelMixture p(10);
            for (int i = 0; i < 10; ++i) {
                const auto u = (std::size_t)i;
                p.wlogit[u] = rng.uniform(-2.0, 2.0);
                p.mu_a[u] = rng.uniform(-1.0, 1.0);
                p.mu_b[u] = rng.uniform(-1.0, 1.0);
                p.ls_a[u] = rng.uniform(-7.0, -6.0);
                p.ls_b[u] = rng.uniform(-7.0, -6.0);
                p.c_ba[u] = rng.uniform(-0.5, 0.5);
            }
            auto grid = pmf_enumerate(p);
            std::vector<double> hist(grid.size(), 0.0);
            Rng srng(derive_seed(9000, "selftest-tv", (std::uint64_t)d));
            const int n = 200000;
            for (int i = 0; i < n; ++i) {
                auto [a, b] = sample_mixture(p, srng);
                hist[(std::size_t)a * 256 + (std::size_t)b] += 1.0 / n;
            }
            double tv = 0.0;
            for (std::size_t i = 0; i < grid.size(); ++i) tv += std::abs(hist[i] - grid[i]);
            tv *= 0.5;
            expect(tv < 0.01, "TV distance " + std::to_string(tv));
        }
        return std::to_string(draws) + " draws x 200k samples, TV < 0.01";
    }));

    push(timed("colorspace.lab_round_trip", [&] {
        for (int v = 0; v < 256; ++v) {
            ImageU8 px(1, 1, 3);
            px.pixels = {(std::uint8_t)v, (std::uint8_t)v, (std::uint8_t)v};
            auto rgb = lab_to_rgb(rgb_to_lab(px));
            expect(rgb.pixels == px.pixels, "gray round trip broke at " + std::to_string(v));
        }
        Rng rng(106);
        const int n = quick ? 2000 : 10000;
        for (int i = 0; i < n; ++i) {
            ImageU8 px(1, 1, 3);
            px.pixels = {(std::uint8_t)rng.below(256), (std::uint8_t)rng.below(256),
                         (std::uint8_t)rng.below(256)};
            auto rgb = lab_to_rgb(rgb_to_lab(px));
            for (int c = 0; c < 3; ++c)
                expect(std::abs((int)rgb.pixels[(std::size_t)c] - (int)px.pixels[(std::size_t)c]) <= 1,
                       "color round trip error > 1");
        }
        return std::string("grays exact, random colors within one 8-bit level");
    }));

    push(timed("dataset.cifar_fixture", [&] {
        namespace fs = std::filesystem;
        const auto path = fs::temp_directory_path() / "pic_selftest_cifar.bin";
        {
            std::ofstream out(path, std::ios::binary);
            out.put((char)0xAB);
            for (int i = 0; i < 3072; ++i) out.put((char)((i * 7 + 13) % 256));
        }
        auto ds = read_cifar10_binary({path.string()}, 0.0);
        fs::remove(path);
        expect(ds.images.size() == 1 && ds.labels[0] == 0xAB, "fixture header mismatch");
        for (int c = 0; c < 3; ++c)
            for (int p = 0; p < 1024; ++p)
                expect((int)ds.images[0].at((std::size_t)(p / 32), (std::size_t)(p % 32), (std::size_t)c) ==
                           ((c * 1024 + p) * 7 + 13) % 256,
                       "fixture pixel mismatch");
        return std::string("3073-byte record decodes bit-exactly");
    }));

    push(timed("checkpoint.round_trip", [&] {
        namespace fs = std::filesystem;
        ParameterStore<double> store;
        Rng rng(107);
        store.create("a.v", {3, 2});
        store.create("b.g", {4});
        store.fill_normal("a.v", rng, 1.0);
        store.fill_normal("b.g", rng, 1.0);
        store.sync_shadows_to_values();
        const auto path = (fs::temp_directory_path() / "pic_selftest_ckpt.pic").string();
        save_checkpoint(store, path, {{"iteration", {7.0}}});
        auto records = load_checkpoint_file(path);
        ParameterStore<double> other;
        other.create("a.v", {3, 2});
        other.create("b.g", {4});
        auto meta = apply_checkpoint(other, records);
        std::string b1 = checkpoint_bytes(store, {{"iteration", {7.0}}});
        std::string b2 = checkpoint_bytes(other, meta);
        fs::remove(path);
        expect(b1 == b2, "save/load/save not byte-identical");
        return std::string("save/load/save byte-identical");
    }));

    push(timed("layers.weight_norm_init", [&] {
        Rng rng(108);
        ParameterStore<double> store;
        WeightNormConv2d<double> layer("wn", 2, 3, 3, 3, ConvAttrs{1, 1, PadSpec::same()});
        layer.register_params(store, rng);
        auto x = random_array({6, 2, 8, 8}, rng, -1.5, 1.5);
        Tape<double> t;
        ParamBinder<double> pb(t, store, false, false);
        pb.init_mode = true;
        auto y = layer.forward(pb, t.leaf(x, false));
        const Shape os = y.shape();
        const std::size_t hw = os[2] * os[3];
        for (std::size_t c = 0; c < os[1]; ++c) {
            double mean = 0.0, var = 0.0;
            for (std::size_t n = 0; n < os[0]; ++n)
                for (std::size_t i = 0; i < hw; ++i) mean += y.cvalue()[(n * os[1] + c) * hw + i];
            mean /= (double)(os[0] * hw);
            for (std::size_t n = 0; n < os[0]; ++n)
                for (std::size_t i = 0; i < hw; ++i) {
                    const double d = y.cvalue()[(n * os[1] + c) * hw + i] - mean;
                    var += d * d;
                }
            var /= (double)(os[0] * hw);
            expect(std::abs(mean) < 1e-6 && std::abs(var - 1.0) < 1e-6, "init stats off");
        }
        return std::string("data-dependent init: per-channel mean 0, variance 1");
    }));

    if (!quick) {
        push(timed("pixelcnn.chain_rule_2x2", [&] {
            ModelConfig cfg;
            cfg.embedding_arch = "c8,c8s2";
            cfg.ar_blocks = 1;
            cfg.ar_channels = 8;
            cfg.mixture_components = 2;
            cfg.levels = 2;
            cfg.subsample = 2;
            ParameterStore<double> store;
            ColorModel<double> model(cfg, store, 109);
            Rng rng(110);
            for (auto& [name, e] : store.entries())
                for (auto& v : e.value.data)
                    v = (name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0)
                            ? 1.0 + 0.1 * rng.normal()
                            : 0.4 * rng.normal();
            ArrayND<double> lum({1, 1, 4, 4});
            for (auto& v : lum.data) v = rng.uniform(-1.0, 1.0);
            ChromaAlphabet ab{2};
            double total = 0.0;
            for (int outcome = 0; outcome < 256; ++outcome) {
                std::vector<int> abins(4), bbins(4);
                int rest = outcome;
                for (int p = 0; p < 4; ++p) {
                    abins[(std::size_t)p] = rest & 1;
                    bbins[(std::size_t)p] = (rest >> 1) & 1;
                    rest >>= 2;
                }
                ArrayND<double> ctx({1, 2, 2, 2});
                for (int p = 0; p < 4; ++p) {
                    ctx.data[(std::size_t)p] = ab.dequantize(abins[(std::size_t)p]);
                    ctx.data[4 + (std::size_t)p] = ab.dequantize(bbins[(std::size_t)p]);
                }
                Tape<double> tape;
                ParamBinder<double> pb(tape, store, false, false);
                auto loss = model.loss(pb, lum, ctx, BatchTargets::from_bins(abins, bbins, 2));
                total += std::exp(-loss.cvalue()[0]);
            }
            expect(std::abs(total - 1.0) < 1e-9, "joint mass " + std::to_string(total));
            return std::string("enumerated joint sums to 1 within 1e-9");
        }));
    }

    return results;
}

}  // namespace pic
