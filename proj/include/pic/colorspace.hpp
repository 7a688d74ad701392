#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "pic/common.hpp"

namespace pic {

// Interleaved 8-bit image, RGB (channels=3) or grayscale (channels=1).
struct ImageU8 {
    std::size_t width = 0, height = 0, channels = 3;
    std::vector<std::uint8_t> pixels;

    ImageU8() = default;
    ImageU8(std::size_t w, std::size_t h, std::size_t c) : width(w), height(h), channels(c), pixels(w * h * c, 0) {}

    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
        return pixels[(y * width + x) * channels + c];
    }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
        return pixels[(y * width + x) * channels + c];
    }
};

// Lab convention: L in [0,100] at full resolution, chroma a in [-127,128]
// and b in [-128,127] at 1/factor resolution.
struct LabImage {
    std::size_t height = 0, width = 0;
    int factor = 1;
    std::vector<double> L;
    std::vector<double> a;
    std::vector<double> b;

    std::size_t chroma_h() const { return height / static_cast<std::size_t>(factor); }
    std::size_t chroma_w() const { return width / static_cast<std::size_t>(factor); }

    static LabImage make(std::size_t h, std::size_t w, int f) {
        check(f >= 1, "subsample factor must be >= 1");
        check(h % static_cast<std::size_t>(f) == 0 && w % static_cast<std::size_t>(f) == 0,
              "image dimensions must be divisible by the subsample factor");
        LabImage img;
        img.height = h;
        img.width = w;
        img.factor = f;
        img.L.assign(h * w, 0.0);
        img.a.assign((h / f) * (w / f), 0.0);
        img.b.assign((h / f) * (w / f), 0.0);
        return img;
    }
};

namespace labdetail {

// sRGB primaries / D65. White normalizers are the exact row sums so that
// RGB (255,255,255) lands on L=100, a=b=0.
constexpr double kM[3][3] = {{0.4124564, 0.3575761, 0.1804375},
                             {0.2126729, 0.7151522, 0.0721750},
                             {0.0193339, 0.1191920, 0.9503041}};
constexpr double kMInv[3][3] = {{3.2404542, -1.5371385, -0.4985314},
                                {-0.9692660, 1.8760108, 0.0415560},
                                {0.0556434, -0.2040259, 1.0572252}};
inline const double kXn = kM[0][0] + kM[0][1] + kM[0][2];
inline const double kYn = kM[1][0] + kM[1][1] + kM[1][2];
inline const double kZn = kM[2][0] + kM[2][1] + kM[2][2];

inline double srgb_to_linear(double c) {
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}
inline double linear_to_srgb(double c) {
    return c <= 0.0031308 ? c * 12.92 : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

inline double lab_f(double t) {
    constexpr double d = 6.0 / 29.0;
    return t > d * d * d ? std::cbrt(t) : t / (3.0 * d * d) + 4.0 / 29.0;
}
inline double lab_f_inv(double f) {
    constexpr double d = 6.0 / 29.0;
    return f > d ? f * f * f : 3.0 * d * d * (f - 4.0 / 29.0);
}

inline double clampd(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

}  // namespace labdetail

inline void rgb_to_lab_pixel(double r8, double g8, double b8, double& L, double& a, double& b) {
    using namespace labdetail;
    const double r = srgb_to_linear(r8 / 255.0);
    const double g = srgb_to_linear(g8 / 255.0);
    const double bl = srgb_to_linear(b8 / 255.0);
    const double x = kM[0][0] * r + kM[0][1] * g + kM[0][2] * bl;
    const double y = kM[1][0] * r + kM[1][1] * g + kM[1][2] * bl;
    const double z = kM[2][0] * r + kM[2][1] * g + kM[2][2] * bl;
    const double fx = lab_f(x / kXn), fy = lab_f(y / kYn), fz = lab_f(z / kZn);
    L = clampd(116.0 * fy - 16.0, 0.0, 100.0);
    a = clampd(500.0 * (fx - fy), -127.0, 128.0);
    b = clampd(200.0 * (fy - fz), -128.0, 127.0);
}

inline void lab_to_rgb_pixel(double L, double a, double b, double& r8, double& g8, double& b8) {
    using namespace labdetail;
    const double fy = (L + 16.0) / 116.0;
    const double fx = fy + a / 500.0;
    const double fz = fy - b / 200.0;
    const double x = kXn * lab_f_inv(fx);
    const double y = kYn * lab_f_inv(fy);
    const double z = kZn * lab_f_inv(fz);
    const double r = clampd(kMInv[0][0] * x + kMInv[0][1] * y + kMInv[0][2] * z, 0.0, 1.0);
    const double g = clampd(kMInv[1][0] * x + kMInv[1][1] * y + kMInv[1][2] * z, 0.0, 1.0);
    const double bl = clampd(kMInv[2][0] * x + kMInv[2][1] * y + kMInv[2][2] * z, 0.0, 1.0);
    r8 = linear_to_srgb(r) * 255.0;
    g8 = linear_to_srgb(g) * 255.0;
    b8 = linear_to_srgb(bl) * 255.0;
}

inline LabImage rgb_to_lab(const ImageU8& img) {
    check(img.channels == 3, "rgb_to_lab expects a 3-channel image");
    LabImage out = LabImage::make(img.height, img.width, 1);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const std::size_t i = y * img.width + x;
            rgb_to_lab_pixel(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2), out.L[i], out.a[i], out.b[i]);
        }
    return out;
}

inline ImageU8 lab_to_rgb(const LabImage& img) {
    check(img.factor == 1, "lab_to_rgb requires full-resolution chroma (upsample first)");
    ImageU8 out(img.width, img.height, 3);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const std::size_t i = y * img.width + x;
            double r, g, b;
            lab_to_rgb_pixel(img.L[i], img.a[i], img.b[i], r, g, b);
            out.at(y, x, 0) = static_cast<std::uint8_t>(std::lround(r));
            out.at(y, x, 1) = static_cast<std::uint8_t>(std::lround(g));
            out.at(y, x, 2) = static_cast<std::uint8_t>(std::lround(b));
        }
    return out;
}

// Grayscale plane interpreted as L = 100 * v / 255, achromatic.
inline LabImage gray_to_lab(const ImageU8& img) {
    check(img.channels == 1 || img.channels == 3, "gray_to_lab expects 1 or 3 channels");
    LabImage out = LabImage::make(img.height, img.width, 1);
    if (img.channels == 1) {
        for (std::size_t i = 0; i < out.L.size(); ++i) out.L[i] = 100.0 * img.pixels[i] / 255.0;
    } else {
        LabImage full = rgb_to_lab(img);
        out.L = full.L;
    }
    return out;
}

// Replaces chroma planes by factor x factor block means; luminance untouched.
inline LabImage subsample_chroma(const LabImage& img, int factor) {
    check(img.factor == 1, "subsample_chroma expects full-resolution input");
    check(factor == 1 || factor == 2 || factor == 4, "subsample factor must be one of {1,2,4}");
    if (img.height % static_cast<std::size_t>(factor) != 0 || img.width % static_cast<std::size_t>(factor) != 0)
        fail_shape("subsample_chroma: ", img.height, "x", img.width, " not divisible by ", factor);
    if (factor == 1) return img;
    LabImage out = LabImage::make(img.height, img.width, factor);
    out.L = img.L;
    const std::size_t ch = out.chroma_h(), cw = out.chroma_w(), f = static_cast<std::size_t>(factor);
    for (std::size_t y = 0; y < ch; ++y)
        for (std::size_t x = 0; x < cw; ++x) {
            double sa = 0.0, sb = 0.0;
            for (std::size_t dy = 0; dy < f; ++dy)
                for (std::size_t dx = 0; dx < f; ++dx) {
                    const std::size_t i = (y * f + dy) * img.width + (x * f + dx);
                    sa += img.a[i];
                    sb += img.b[i];
                }
            out.a[y * cw + x] = sa / static_cast<double>(f * f);
            out.b[y * cw + x] = sb / static_cast<double>(f * f);
        }
    return out;
}

enum class UpsampleMode { Nearest, Bilinear };

namespace labdetail {

// Separable resize with half-pixel center alignment.
inline std::vector<double> resize_plane(const std::vector<double>& src, std::size_t sh, std::size_t sw,
                                        std::size_t dh, std::size_t dw, UpsampleMode mode) {
    auto src_coord = [](std::size_t d, std::size_t dn, std::size_t sn) {
        return (static_cast<double>(d) + 0.5) * static_cast<double>(sn) / static_cast<double>(dn) - 0.5;
    };
    if (mode == UpsampleMode::Nearest) {
        std::vector<double> out(dh * dw);
        for (std::size_t y = 0; y < dh; ++y)
            for (std::size_t x = 0; x < dw; ++x) {
                std::size_t sy = std::min<std::size_t>(sh - 1, y * sh / dh);
                std::size_t sx = std::min<std::size_t>(sw - 1, x * sw / dw);
                out[y * dw + x] = src[sy * sw + sx];
            }
        return out;
    }
    // horizontal pass
    std::vector<double> tmp(sh * dw);
    for (std::size_t x = 0; x < dw; ++x) {
        const double c = src_coord(x, dw, sw);
        const double cf = std::floor(c);
        long i0 = static_cast<long>(cf);
        const double w1 = c - cf;
        long i1 = i0 + 1;
        i0 = std::min<long>(std::max<long>(i0, 0), static_cast<long>(sw) - 1);
        i1 = std::min<long>(std::max<long>(i1, 0), static_cast<long>(sw) - 1);
        for (std::size_t y = 0; y < sh; ++y)
            tmp[y * dw + x] = src[y * sw + static_cast<std::size_t>(i0)] * (1.0 - w1) +
                              src[y * sw + static_cast<std::size_t>(i1)] * w1;
    }
    std::vector<double> out(dh * dw);
    for (std::size_t y = 0; y < dh; ++y) {
        const double c = src_coord(y, dh, sh);
        const double cf = std::floor(c);
        long i0 = static_cast<long>(cf);
        const double w1 = c - cf;
        long i1 = i0 + 1;
        i0 = std::min<long>(std::max<long>(i0, 0), static_cast<long>(sh) - 1);
        i1 = std::min<long>(std::max<long>(i1, 0), static_cast<long>(sh) - 1);
        for (std::size_t x = 0; x < dw; ++x)
            out[y * dw + x] = tmp[static_cast<std::size_t>(i0) * dw + x] * (1.0 - w1) +
                              tmp[static_cast<std::size_t>(i1) * dw + x] * w1;
    }
    return out;
}

}  // namespace labdetail

inline LabImage upsample_chroma(const LabImage& img, UpsampleMode mode) {
    if (img.factor == 1) return img;
    LabImage out = LabImage::make(img.height, img.width, 1);
    out.L = img.L;
    out.a = labdetail::resize_plane(img.a, img.chroma_h(), img.chroma_w(), img.height, img.width, mode);
    out.b = labdetail::resize_plane(img.b, img.chroma_h(), img.chroma_w(), img.height, img.width, mode);
    return out;
}

// --- chroma alphabet ----------------------------------------------------------

// Affine bijection between the paper chroma ranges and [-1,1], plus the
// uniform quantization grid the mixture is evaluated over.
struct ChromaAlphabet {
    int levels = 256;

    static double normalize_a(double a) {
        check(a >= -127.0 && a <= 128.0, "chroma a out of range [-127,128]");
        return (2.0 * a - 1.0) / 255.0;
    }
    static double normalize_b(double b) {
        check(b >= -128.0 && b <= 127.0, "chroma b out of range [-128,127]");
        return (2.0 * b + 1.0) / 255.0;
    }
    static double denormalize_a(double x) { return (255.0 * x + 1.0) / 2.0; }
    static double denormalize_b(double x) { return (255.0 * x - 1.0) / 2.0; }

    int quantize(double v) const {
        check(v >= -1.0 - 1e-12 && v <= 1.0 + 1e-12, "normalized chroma out of [-1,1]");
        const double scaled = (v + 1.0) * 0.5 * static_cast<double>(levels - 1);
        long bin = std::lround(scaled);
        if (bin < 0) bin = 0;
        if (bin >= levels) bin = levels - 1;
        return static_cast<int>(bin);
    }

    double dequantize(int bin) const {
        check(bin >= 0 && bin < levels, "bin index out of range");
        return static_cast<double>(2 * bin - (levels - 1)) / static_cast<double>(levels - 1);
    }

    double bin_width() const { return 2.0 / static_cast<double>(levels - 1); }
};

}  // namespace pic
