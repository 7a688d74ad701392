#pragma once

#include <algorithm>
#include <cmath>
#include <memory>

#include "pic/tape.hpp"

namespace pic {

namespace num {

// Scalar kernels shared by the tape ops and the plain evaluation paths in
// mixture.hpp; keeping one definition makes the two routes agree bitwise.
template <class T>
inline T sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
inline T softplus(T x) {
    if (x > T(0)) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

template <class T>
inline T elu(T x) {
    return x > T(0) ? x : std::expm1(x);
}

template <class T>
inline T elu_grad(T x) {
    return x > T(0) ? T(1) : std::exp(x);
}

// log(1 - e^u) for u < 0
template <class T>
inline T log1mexp(T u) {
    constexpr T ln2 = T(0.6931471805599453);
    if (u > -ln2) return std::log(-std::expm1(u));
    return std::log1p(-std::exp(u));
}

// Discretized logistic log-mass of one quantization bin. Levels-per-channel
// L gives bin centers (2i-(L-1))/(L-1) on [-1,1]; the outermost bins absorb
// the open tails. Stable for tiny masses and near-delta scales.
template <class T>
inline T disc_logistic_logpmf(T mu, T log_scale, int bin, int levels) {
    const T t = std::min(std::max(log_scale, T(-745)), T(745));
    const T inv_s = std::exp(-t);
    const T half = T(1) / T(levels - 1);
    const T x = T(2 * bin - (levels - 1)) / T(levels - 1);
    const T c = x - mu;
    const T b = (c + half) * inv_s;
    const T a = (c - half) * inv_s;
    if (bin <= 0) return -softplus(-b);
    if (bin >= levels - 1) return -softplus(a);
    return -softplus(-b) - softplus(a) + log1mexp(a - b);
}

}  // namespace num

namespace detail {

template <class T>
inline void same_tape(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.tape == b.tape, "op inputs live on different tapes");
}

// --- row-major matrix kernels -------------------------------------------
// Parallelism is across output rows only; every row is a sequential
// reduction, so values are identical for any worker count.

template <class T>
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
    parallel_for(m, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            T* ci = c + i * n;
            if (!accumulate) std::fill(ci, ci + n, T(0));
            const T* ai = a + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = ai[p];
                if (av == T(0)) continue;
                const T* bp = b + p * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    });
}

// c[m][n] += dot(a_row m, b_row n); b is used transposed
template <class T>
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
    parallel_for(m, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const T* ai = a + i * k;
            T* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const T* bj = b + j * k;
                T acc = T(0);
                for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
                if (accumulate)
                    ci[j] += acc;
                else
                    ci[j] = acc;
            }
        }
    });
}

// c[m][n] (+)= sum_p a[p][m] * b[p][n]; a is used transposed
template <class T>
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate) {
    parallel_for(m, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            T* ci = c + i * n;
            if (!accumulate) std::fill(ci, ci + n, T(0));
            for (std::size_t p = 0; p < k; ++p) {
                const T av = a[p * m + i];
                if (av == T(0)) continue;
                const T* bp = b + p * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    });
}

// --- broadcasting ---------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            fail_shape("shapes not broadcastable: ", shape_str(a), " vs ", shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// element strides of `in` viewed under the broadcast shape `out`
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> stride(out.size(), 0);
    std::size_t acc = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
        std::size_t oi = i + (out.size() - in.size());
        stride[oi] = (in[i] == 1) ? 0 : acc;
        acc *= in[i];
    }
    return stride;
}

struct BcastIter {
    Shape out;
    std::vector<std::size_t> sa, sb;
    std::size_t n;

    BcastIter(const Shape& a, const Shape& b) {
        out = broadcast_shape(a, b);
        sa = broadcast_strides(a, out);
        sb = broadcast_strides(b, out);
        n = numel(out);
    }

    // walks all output elements, yielding (flat_out, off_a, off_b)
    template <class F>
    void walk(F&& f) const {
        std::vector<std::size_t> idx(out.size(), 0);
        std::size_t oa = 0, ob = 0;
        for (std::size_t o = 0; o < n; ++o) {
            f(o, oa, ob);
            for (std::size_t d = out.size(); d-- > 0;) {
                ++idx[d];
                oa += sa[d];
                ob += sb[d];
                if (idx[d] < out[d]) break;
                idx[d] = 0;
                oa -= sa[d] * out[d];
                ob -= sb[d] * out[d];
                if (d == 0) return;
            }
        }
    }
};

}  // namespace detail

// --- elementwise unaries ----------------------------------------------------

// out = f(x); dgrad(x_val, y_val) gives dy/dx for the backward factor
template <class T, class F, class G>
Tensor<T> unary_op(const Tensor<T>& x, F&& f, G&& dgrad) {
    Tape<T>* tp = x.tape;
    const auto& xv = x.cvalue();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    int xid = x.id;
    int yid = static_cast<int>(tp->node_count());
    bool rg = x.requires_grad();
    return tp->emit(x.shape(), std::move(out), rg, [tp, xid, yid, dgrad]() {
        const auto& gy = tp->node(yid).grad;
        const auto& xv2 = tp->node(xid).value;
        const auto& yv2 = tp->node(yid).value;
        auto& gx = tp->grad_buffer(xid);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dgrad(xv2[i], yv2[i]) * gy[i];
    });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}
template <class T>
Tensor<T> exp_op(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}
template <class T>
Tensor<T> log_op(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}
template <class T>
Tensor<T> sigmoid_op(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return num::sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}
template <class T>
Tensor<T> tanh_op(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}
template <class T>
Tensor<T> softplus_op(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return num::softplus(v); }, [](T v, T) { return num::sigmoid(v); });
}
template <class T>
Tensor<T> elu_op(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return num::elu(v); }, [](T v, T) { return num::elu_grad(v); });
}
template <class T>
Tensor<T> rsqrt_op(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return T(1) / std::sqrt(v); }, [](T, T y) { return T(-0.5) * y * y * y; });
}
template <class T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
    return unary_op(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}
template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    return unary_op(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}
template <class T>
Tensor<T> clamp_op(const Tensor<T>& x, T lo, T hi) {
    return unary_op(
        x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

// --- broadcasting binaries --------------------------------------------------

namespace detail {

template <class T, class FwdF, class DA, class DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, FwdF&& f, DA&& da, DB&& db) {
    same_tape(a, b);
    Tape<T>* tp = a.tape;
    const auto& av = a.cvalue();
    const auto& bv = b.cvalue();
    bool rg = a.requires_grad() || b.requires_grad();
    int aid = a.id, bid = b.id;

    if (a.shape() == b.shape()) {  // fast path, no index decoding
        std::vector<T> out(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
        int yid = static_cast<int>(tp->node_count());
        return tp->emit(a.shape(), std::move(out), rg, [tp, aid, bid, yid, da, db]() {
            const auto& gy = tp->node(yid).grad;
            const auto& av2 = tp->node(aid).value;
            const auto& bv2 = tp->node(bid).value;
            if (tp->node(aid).requires_grad) {
                auto& ga = tp->grad_buffer(aid);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += da(av2[i], bv2[i]) * gy[i];
            }
            if (tp->node(bid).requires_grad) {
                auto& gb = tp->grad_buffer(bid);
                for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += db(av2[i], bv2[i]) * gy[i];
            }
        });
    }

    auto it = std::make_shared<BcastIter>(a.shape(), b.shape());
    std::vector<T> out(it->n);
    it->walk([&](std::size_t o, std::size_t oa, std::size_t ob) { out[o] = f(av[oa], bv[ob]); });
    int yid = static_cast<int>(tp->node_count());
    return tp->emit(it->out, std::move(out), rg, [tp, aid, bid, yid, it, da, db]() {
        const auto& gy = tp->node(yid).grad;
        const auto& av2 = tp->node(aid).value;
        const auto& bv2 = tp->node(bid).value;
        bool need_a = tp->node(aid).requires_grad;
        bool need_b = tp->node(bid).requires_grad;
        T* ga = need_a ? tp->grad_buffer(aid).data() : nullptr;
        T* gb = need_b ? tp->grad_buffer(bid).data() : nullptr;
        it->walk([&](std::size_t o, std::size_t oa, std::size_t ob) {
            if (ga) ga[oa] += da(av2[oa], bv2[ob]) * gy[o];
            if (gb) gb[ob] += db(av2[oa], bv2[ob]) * gy[o];
        });
    });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

// --- reductions ---------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    Tape<T>* tp = x.tape;
    const auto& xv = x.cvalue();
    T acc = T(0);
    for (T v : xv) acc += v;
    int xid = x.id;
    int yid = static_cast<int>(tp->node_count());
    return tp->emit(Shape{1}, std::vector<T>{acc}, x.requires_grad(), [tp, xid, yid]() {
        const T g = tp->node(yid).grad[0];
        auto& gx = tp->grad_buffer(xid);
        for (auto& v : gx) v += g;
    });
}

// Sum over the given axes, keeping them as extent-1 dims.
template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    Tape<T>* tp = x.tape;
    const Shape& xs = x.shape();
    Shape os = xs;
    for (std::size_t ax : axes) {
        check(ax < xs.size(), "reduce_sum: axis out of range");
        os[ax] = 1;
    }
    auto it = std::make_shared<detail::BcastIter>(os, xs);  // os broadcast against xs spans xs
    const auto& xv = x.cvalue();
    std::vector<T> out(numel(os), T(0));
    it->walk([&](std::size_t, std::size_t oo, std::size_t ox) { out[oo] += xv[ox]; });
    int xid = x.id;
    int yid = static_cast<int>(tp->node_count());
    return tp->emit(os, std::move(out), x.requires_grad(), [tp, xid, yid, it]() {
        const auto& gy = tp->node(yid).grad;
        auto& gx = tp->grad_buffer(xid);
        it->walk([&](std::size_t, std::size_t oo, std::size_t ox) { gx[ox] += gy[oo]; });
    });
}

// Stable log-sum-exp along one axis (kept as extent 1).
template <class T>
Tensor<T> log_sum_exp(const Tensor<T>& x, std::size_t axis) {
    Tape<T>* tp = x.tape;
    const Shape& xs = x.shape();
    check(axis < xs.size(), "log_sum_exp: axis out of range for " + shape_str(xs));
    Shape os = xs;
    os[axis] = 1;

    std::size_t outer = 1, inner = 1, n = xs[axis];
    for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
    for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];

    const auto& xv = x.cvalue();
    std::vector<T> out(outer * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const T* base = xv.data() + o * n * inner + i;
            T m = base[0];
            for (std::size_t j = 1; j < n; ++j) m = std::max(m, base[j * inner]);
            T s = T(0);
            for (std::size_t j = 0; j < n; ++j) s += std::exp(base[j * inner] - m);
            out[o * inner + i] = m + std::log(s);
        }
    int xid = x.id;
    int yid = static_cast<int>(tp->node_count());
    return tp->emit(os, std::move(out), x.requires_grad(), [tp, xid, yid, outer, inner, n]() {
        const auto& gy = tp->node(yid).grad;
        const auto& yv = tp->node(yid).value;
        const auto& xv2 = tp->node(xid).value;
        auto& gx = tp->grad_buffer(xid);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                const T lse = yv[o * inner + i];
                const T g = gy[o * inner + i];
                for (std::size_t j = 0; j < n; ++j) {
                    std::size_t k = o * n * inner + j * inner + i;
                    gx[k] += std::exp(xv2[k] - lse) * g;
                }
            }
    });
}

// --- structure ops ------------------------------------------------------------

// Channel concatenation of elu(x) and elu(-x); doubles the channel count.
template <class T>
Tensor<T> concat_elu(const Tensor<T>& x) {
    Tape<T>* tp = x.tape;
    const Shape& xs = x.shape();
    check(xs.size() == 4, "concat_elu expects NCHW, got " + shape_str(xs));
    const std::size_t nb = xs[0], c = xs[1], hw = xs[2] * xs[3];
    Shape os{nb, 2 * c, xs[2], xs[3]};
    const auto& xv = x.cvalue();
    std::vector<T> out(numel(os));
    for (std::size_t b = 0; b < nb; ++b) {
        const T* src = xv.data() + b * c * hw;
        T* d0 = out.data() + b * 2 * c * hw;
        T* d1 = d0 + c * hw;
        for (std::size_t i = 0; i < c * hw; ++i) {
            d0[i] = num::elu(src[i]);
            d1[i] = num::elu(-src[i]);
        }
    }
    int xid = x.id;
    int yid = static_cast<int>(tp->node_count());
    return tp->emit(os, std::move(out), x.requires_grad(), [tp, xid, yid, nb, c, hw]() {
        const auto& gy = tp->node(yid).grad;
        const auto& xv2 = tp->node(xid).value;
        auto& gx = tp->grad_buffer(xid);
        for (std::size_t b = 0; b < nb; ++b) {
            const T* src = xv2.data() + b * c * hw;
            const T* g0 = gy.data() + b * 2 * c * hw;
            const T* g1 = g0 + c * hw;
            T* dst = gx.data() + b * c * hw;
            for (std::size_t i = 0; i < c * hw; ++i)
                dst[i] += num::elu_grad(src[i]) * g0[i] - num::elu_grad(-src[i]) * g1[i];
        }
    });
}

// Same data, new extents.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape target) {
    Tape<T>* tp = x.tape;
    check(numel(target) == x.size(),
          "reshape: " + shape_str(x.shape()) + " has wrong element count for " + shape_str(target));
    int xid = x.id;
    int yid = static_cast<int>(tp->node_count());
    return tp->emit(std::move(target), x.cvalue(), x.requires_grad(), [tp, xid, yid]() {
        const auto& gy = tp->node(yid).grad;
        auto& gx = tp->grad_buffer(xid);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
}

template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
    Tape<T>* tp = x.tape;
    const Shape& xs = x.shape();
    check(xs.size() == 4 && c0 < c1 && c1 <= xs[1], "slice_channels: bad range");
    const std::size_t nb = xs[0], c = xs[1], hw = xs[2] * xs[3], cs = c1 - c0;
    Shape os{nb, cs, xs[2], xs[3]};
    const auto& xv = x.cvalue();
    std::vector<T> out(numel(os));
    for (std::size_t b = 0; b < nb; ++b)
        std::copy(xv.data() + (b * c + c0) * hw, xv.data() + (b * c + c1) * hw, out.data() + b * cs * hw);
    int xid = x.id;
    int yid = static_cast<int>(tp->node_count());
    return tp->emit(os, std::move(out), x.requires_grad(), [tp, xid, yid, nb, c, c0, cs, hw]() {
        const auto& gy = tp->node(yid).grad;
        auto& gx = tp->grad_buffer(xid);
        for (std::size_t b = 0; b < nb; ++b) {
            const T* g = gy.data() + b * cs * hw;
            T* dst = gx.data() + (b * c + c0) * hw;
            for (std::size_t i = 0; i < cs * hw; ++i) dst[i] += g[i];
        }
    });
}

namespace detail {
// dr/dc in {0,1}: translate content down/right by one, zero-filling the edge
template <class T>
Tensor<T> shift_op(const Tensor<T>& x, int dr, int dc) {
    Tape<T>* tp = x.tape;
    const Shape& xs = x.shape();
    check(xs.size() == 4, "shift expects NCHW, got " + shape_str(xs));
    const std::size_t nc = xs[0] * xs[1], h = xs[2], w = xs[3];
    const auto& xv = x.cvalue();
    std::vector<T> out(xv.size(), T(0));
    for (std::size_t p = 0; p < nc; ++p) {
        const T* src = xv.data() + p * h * w;
        T* dst = out.data() + p * h * w;
        for (std::size_t r = static_cast<std::size_t>(dr); r < h; ++r)
            for (std::size_t c = static_cast<std::size_t>(dc); c < w; ++c)
                dst[r * w + c] = src[(r - dr) * w + (c - dc)];
    }
    int xid = x.id;
    int yid = static_cast<int>(tp->node_count());
    return tp->emit(xs, std::move(out), x.requires_grad(), [tp, xid, yid, nc, h, w, dr, dc]() {
        const auto& gy = tp->node(yid).grad;
        auto& gx = tp->grad_buffer(xid);
        for (std::size_t p = 0; p < nc; ++p) {
            const T* g = gy.data() + p * h * w;
            T* dst = gx.data() + p * h * w;
            for (std::size_t r = static_cast<std::size_t>(dr); r < h; ++r)
                for (std::size_t c = static_cast<std::size_t>(dc); c < w; ++c)
                    dst[(r - dr) * w + (c - dc)] += g[r * w + c];
        }
    });
}
}  // namespace detail

// Row i of the output is row i-1 of the input; row 0 is zero.
template <class T>
Tensor<T> shift_down(const Tensor<T>& x) {
    return detail::shift_op(x, 1, 0);
}

// Column j of the output is column j-1 of the input; column 0 is zero.
template <class T>
Tensor<T> shift_right(const Tensor<T>& x) {
    return detail::shift_op(x, 0, 1);
}

// --- convolution ----------------------------------------------------------------

struct PadSpec {
    enum class Mode { Same, Valid, Explicit } mode = Mode::Same;
    int t = 0, b = 0, l = 0, r = 0;

    static PadSpec same() { return {Mode::Same}; }
    static PadSpec valid() { return {Mode::Valid}; }
    static PadSpec explicit_pad(int t, int b, int l, int r) { return {Mode::Explicit, t, b, l, r}; }
};

struct ConvAttrs {
    int stride = 1;
    int dilation = 1;
    PadSpec pad = PadSpec::same();
};

namespace detail {

struct ConvPlan {
    std::size_t n, ci, h, w, co, kh, kw;
    std::size_t oh, ow;
    int stride, dilation, pt, pl;
};

inline ConvPlan make_conv_plan(const Shape& xs, const Shape& ks, const ConvAttrs& at) {
    check(xs.size() == 4, "conv2d: input must be NCHW, got " + shape_str(xs));
    check(ks.size() == 4, "conv2d: kernel must be [Co,C,kh,kw], got " + shape_str(ks));
    if (xs[1] != ks[1])
        fail_shape("conv2d: input channels ", shape_str(xs), " do not match kernel ", shape_str(ks));
    check(at.stride >= 1 && at.dilation >= 1, "conv2d: stride and dilation must be >= 1");

    ConvPlan p;
    p.n = xs[0];
    p.ci = xs[1];
    p.h = xs[2];
    p.w = xs[3];
    p.co = ks[0];
    p.kh = ks[2];
    p.kw = ks[3];
    p.stride = at.stride;
    p.dilation = at.dilation;

    const long ekh = static_cast<long>(at.dilation) * (static_cast<long>(p.kh) - 1) + 1;
    const long ekw = static_cast<long>(at.dilation) * (static_cast<long>(p.kw) - 1) + 1;
    long pt = 0, pb = 0, pl = 0, pr = 0;
    switch (at.pad.mode) {
        case PadSpec::Mode::Same: {
            const long oh = (static_cast<long>(p.h) + at.stride - 1) / at.stride;
            const long ow = (static_cast<long>(p.w) + at.stride - 1) / at.stride;
            const long ph = std::max<long>(0, (oh - 1) * at.stride + ekh - static_cast<long>(p.h));
            const long pw = std::max<long>(0, (ow - 1) * at.stride + ekw - static_cast<long>(p.w));
            pt = ph / 2;
            pb = ph - pt;
            pl = pw / 2;
            pr = pw - pl;
            break;
        }
        case PadSpec::Mode::Valid:
            break;
        case PadSpec::Mode::Explicit:
            pt = at.pad.t;
            pb = at.pad.b;
            pl = at.pad.l;
            pr = at.pad.r;
            break;
    }
    const long oh = (static_cast<long>(p.h) + pt + pb - ekh) / at.stride + 1;
    const long ow = (static_cast<long>(p.w) + pl + pr - ekw) / at.stride + 1;
    if (oh <= 0 || ow <= 0)
        fail_shape("conv2d: empty output for input ", shape_str(xs), " kernel ", shape_str(ks));
    p.oh = static_cast<std::size_t>(oh);
    p.ow = static_cast<std::size_t>(ow);
    p.pt = static_cast<int>(pt);
    p.pl = static_cast<int>(pl);
    return p;
}

// cols is [ci*kh*kw x oh*ow] for one image
template <class T>
inline void im2col(const ConvPlan& p, const T* img, T* cols) {
    const std::size_t spatial = p.oh * p.ow;
    std::size_t row = 0;
    for (std::size_t c = 0; c < p.ci; ++c) {
        const T* plane = img + c * p.h * p.w;
        for (std::size_t ki = 0; ki < p.kh; ++ki)
            for (std::size_t kj = 0; kj < p.kw; ++kj, ++row) {
                T* dst = cols + row * spatial;
                for (std::size_t oy = 0; oy < p.oh; ++oy) {
                    const long iy = static_cast<long>(oy) * p.stride + static_cast<long>(ki) * p.dilation - p.pt;
                    if (iy < 0 || iy >= static_cast<long>(p.h)) {
                        std::fill(dst + oy * p.ow, dst + (oy + 1) * p.ow, T(0));
                        continue;
                    }
                    const T* src_row = plane + static_cast<std::size_t>(iy) * p.w;
                    for (std::size_t ox = 0; ox < p.ow; ++ox) {
                        const long ix = static_cast<long>(ox) * p.stride + static_cast<long>(kj) * p.dilation - p.pl;
                        dst[oy * p.ow + ox] =
                            (ix < 0 || ix >= static_cast<long>(p.w)) ? T(0) : src_row[static_cast<std::size_t>(ix)];
                    }
                }
            }
    }
}

template <class T>
inline void col2im_add(const ConvPlan& p, const T* cols, T* img) {
    const std::size_t spatial = p.oh * p.ow;
    std::size_t row = 0;
    for (std::size_t c = 0; c < p.ci; ++c) {
        T* plane = img + c * p.h * p.w;
        for (std::size_t ki = 0; ki < p.kh; ++ki)
            for (std::size_t kj = 0; kj < p.kw; ++kj, ++row) {
                const T* src = cols + row * spatial;
                for (std::size_t oy = 0; oy < p.oh; ++oy) {
                    const long iy = static_cast<long>(oy) * p.stride + static_cast<long>(ki) * p.dilation - p.pt;
                    if (iy < 0 || iy >= static_cast<long>(p.h)) continue;
                    T* dst_row = plane + static_cast<std::size_t>(iy) * p.w;
                    for (std::size_t ox = 0; ox < p.ow; ++ox) {
                        const long ix = static_cast<long>(ox) * p.stride + static_cast<long>(kj) * p.dilation - p.pl;
                        if (ix < 0 || ix >= static_cast<long>(p.w)) continue;
                        dst_row[static_cast<std::size_t>(ix)] += src[oy * p.ow + ox];
                    }
                }
            }
    }
}

inline bool is_pointwise(const ConvPlan& p) {
    return p.kh == 1 && p.kw == 1 && p.stride == 1 && p.pt == 0 && p.pl == 0 && p.oh == p.h && p.ow == p.w;
}

}  // namespace detail

// Cross-correlation with bias; gradients flow to input, kernel and bias.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, const ConvAttrs& attrs = {}) {
    detail::same_tape(x, kernel);
    detail::same_tape(x, bias);
    Tape<T>* tp = x.tape;
    auto plan = detail::make_conv_plan(x.shape(), kernel.shape(), attrs);
    check(bias.shape() == Shape{plan.co},
          "conv2d: bias shape " + shape_str(bias.shape()) + " must be [" + std::to_string(plan.co) + "]");

    const std::size_t spatial = plan.oh * plan.ow;
    const std::size_t krows = plan.ci * plan.kh * plan.kw;
    const auto& xv = x.cvalue();
    const auto& kv = kernel.cvalue();
    const auto& bv = bias.cvalue();

    std::vector<T> out(plan.n * plan.co * spatial);
    const bool pointwise = detail::is_pointwise(plan);
    std::vector<T> cols;
    if (!pointwise) cols.resize(krows * spatial);
    for (std::size_t img = 0; img < plan.n; ++img) {
        const T* src = xv.data() + img * plan.ci * plan.h * plan.w;
        const T* mat = src;
        if (!pointwise) {
            detail::im2col(plan, src, cols.data());
            mat = cols.data();
        }
        T* dst = out.data() + img * plan.co * spatial;
        detail::gemm_nn(plan.co, krows, spatial, kv.data(), mat, dst, false);
        for (std::size_t c = 0; c < plan.co; ++c) {
            T* row = dst + c * spatial;
            const T b = bv[c];
            for (std::size_t i = 0; i < spatial; ++i) row[i] += b;
        }
    }

    int xid = x.id, kid = kernel.id, bid = bias.id;
    int yid = static_cast<int>(tp->node_count());
    bool rg = x.requires_grad() || kernel.requires_grad() || bias.requires_grad();
    Shape os{plan.n, plan.co, plan.oh, plan.ow};
    return tp->emit(os, std::move(out), rg, [tp, xid, kid, bid, yid, plan, spatial, krows, pointwise]() {
        const auto& gy = tp->node(yid).grad;
        const auto& xv2 = tp->node(xid).value;
        const auto& kv2 = tp->node(kid).value;
        const bool need_x = tp->node(xid).requires_grad;
        const bool need_k = tp->node(kid).requires_grad;
        const bool need_b = tp->node(bid).requires_grad;

        if (need_b) {
            auto& gb = tp->grad_buffer(bid);
            for (std::size_t img = 0; img < plan.n; ++img)
                for (std::size_t c = 0; c < plan.co; ++c) {
                    const T* row = gy.data() + (img * plan.co + c) * spatial;
                    T acc = T(0);
                    for (std::size_t i = 0; i < spatial; ++i) acc += row[i];
                    gb[c] += acc;
                }
        }
        if (!need_x && !need_k) return;

        std::vector<T> cols;
        if (!pointwise) cols.resize(krows * spatial);
        std::vector<T> dcols(need_x && !pointwise ? krows * spatial : 0);
        T* gk = need_k ? tp->grad_buffer(kid).data() : nullptr;
        T* gx = need_x ? tp->grad_buffer(xid).data() : nullptr;
        for (std::size_t img = 0; img < plan.n; ++img) {
            const T* src = xv2.data() + img * plan.ci * plan.h * plan.w;
            const T* gy_img = gy.data() + img * plan.co * spatial;
            const T* mat = src;
            if (!pointwise) {
                detail::im2col(plan, src, cols.data());
                mat = cols.data();
            }
            if (need_k) detail::gemm_nt(plan.co, spatial, krows, gy_img, mat, gk, true);
            if (need_x) {
                T* gx_img = gx + img * plan.ci * plan.h * plan.w;
                if (pointwise) {
                    detail::gemm_tn(krows, plan.co, spatial, kv2.data(), gy_img, gx_img, true);
                } else {
                    detail::gemm_tn(krows, plan.co, spatial, kv2.data(), gy_img, dcols.data(), false);
                    detail::col2im_add(plan, dcols.data(), gx_img);
                }
            }
        }
    });
}

// --- discretized logistic log-pmf (fused) ------------------------------------

// Per-position quantized targets; `x` holds dequantized bin centers and is
// broadcast along the component axis of mu/log_scale.
struct MixTargets {
    std::vector<double> x;   // [N*h*w]
    std::vector<int> bin;    // [N*h*w]
    int levels = 256;
};

// mu, log_scale: [N,K,h,w]; returns elementwise log P(bin) of shape [N,K,h,w].
template <class T>
Tensor<T> disc_logistic_logpmf_op(const Tensor<T>& mu, const Tensor<T>& log_scale,
                                  std::shared_ptr<const MixTargets> tg) {
    detail::same_tape(mu, log_scale);
    Tape<T>* tp = mu.tape;
    const Shape& ms = mu.shape();
    check(ms == log_scale.shape(), "logpmf: mu and log_scale shapes differ");
    check(ms.size() == 4, "logpmf: expects NCHW params");
    const std::size_t nb = ms[0], k = ms[1], hw = ms[2] * ms[3];
    check(tg->x.size() == nb * hw && tg->bin.size() == nb * hw, "logpmf: target size mismatch");

    const auto& mv = mu.cvalue();
    const auto& sv = log_scale.cvalue();
    std::vector<T> out(mv.size());
    for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t c = 0; c < k; ++c)
            for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t pe = (b * k + c) * hw + i;
                const std::size_t pt = b * hw + i;
                out[pe] = num::disc_logistic_logpmf(mv[pe], sv[pe], tg->bin[pt], tg->levels);
            }

    int mid = mu.id, sid = log_scale.id;
    int yid = static_cast<int>(tp->node_count());
    bool rg = mu.requires_grad() || log_scale.requires_grad();
    const int levels = tg->levels;
    return tp->emit(ms, std::move(out), rg, [tp, mid, sid, yid, tg, nb, k, hw, levels]() {
        const auto& gy = tp->node(yid).grad;
        const auto& mv2 = tp->node(mid).value;
        const auto& sv2 = tp->node(sid).value;
        const bool need_m = tp->node(mid).requires_grad;
        const bool need_s = tp->node(sid).requires_grad;
        T* gm = need_m ? tp->grad_buffer(mid).data() : nullptr;
        T* gs = need_s ? tp->grad_buffer(sid).data() : nullptr;
        const T halfw = T(1) / T(levels - 1);
        for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t c = 0; c < k; ++c)
                for (std::size_t i = 0; i < hw; ++i) {
                    const std::size_t pe = (b * k + c) * hw + i;
                    const std::size_t pt = b * hw + i;
                    const T g = gy[pe];
                    if (g == T(0)) continue;
                    const int bin = tg->bin[pt];
                    const T t = std::min(std::max(sv2[pe], T(-745)), T(745));
                    const T inv_s = std::exp(-t);
                    const T x = T(2 * bin - (levels - 1)) / T(levels - 1);
                    const T cc = x - mv2[pe];
                    const T bb = (cc + halfw) * inv_s;
                    const T aa = (cc - halfw) * inv_s;
                    T dmu, dt;
                    if (bin <= 0) {
                        const T s_nb = num::sigmoid(-bb);
                        dmu = -inv_s * s_nb;
                        dt = -bb * s_nb;
                    } else if (bin >= levels - 1) {
                        const T s_a = num::sigmoid(aa);
                        dmu = inv_s * s_a;
                        dt = aa * s_a;
                    } else {
                        const T denom = -std::expm1(aa - bb);
                        const T dfdb = std::exp(num::softplus(aa) - num::softplus(bb)) / denom;
                        const T dfda = -std::exp(num::softplus(-bb) - num::softplus(-aa)) / denom;
                        dmu = -inv_s * (dfdb + dfda);
                        dt = -(bb * dfdb + aa * dfda);
                    }
                    if (gm) gm[pe] += dmu * g;
                    if (gs) gs[pe] += dt * g;
                }
    });
}

}  // namespace pic
