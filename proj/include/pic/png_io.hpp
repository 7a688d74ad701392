#pragma once

#include <png.h>

#include <cstdio>
#include <string>

#include "pic/colorspace.hpp"

namespace pic {

struct PngError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Reads an 8-bit PNG as grayscale (1 channel) or RGB (3 channels); palette,
// 16-bit and alpha variants are normalized on the way in.
inline ImageU8 read_png(const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw PngError("cannot open PNG: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw PngError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw PngError("failed reading PNG: " + path);
    }
    png_init_io(png, fp);
    png_read_png(png, info,
                 PNG_TRANSFORM_STRIP_16 | PNG_TRANSFORM_PACKING | PNG_TRANSFORM_EXPAND |
                     PNG_TRANSFORM_STRIP_ALPHA,
                 nullptr);
    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const png_byte color = png_get_color_type(png, info);
    const std::size_t channels = (color == PNG_COLOR_TYPE_GRAY) ? 1 : 3;

    ImageU8 out(w, h, channels);
    png_bytepp rows = png_get_rows(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    if (rowbytes != w * channels) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw PngError("unsupported PNG layout: " + path);
    }
    for (png_uint_32 y = 0; y < h; ++y)
        std::copy(rows[y], rows[y] + rowbytes, out.pixels.begin() + static_cast<long>(y * rowbytes));
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return out;
}

inline void write_png(const ImageU8& img, const std::string& path) {
    check(img.channels == 1 || img.channels == 3, "write_png: 1 or 3 channels only");
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw PngError("cannot open PNG for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw PngError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw PngError("failed writing PNG: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    std::vector<png_bytep> rows(img.height);
    std::vector<std::uint8_t> buf = img.pixels;
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = buf.data() + y * img.width * img.channels;
    png_set_rows(png, info, rows.data());
    png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

}  // namespace pic
