#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <string>
#include <vector>

#include <png.h>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace duvsynth {

namespace detail {

struct FileCloser {
    FILE* f = nullptr;
    ~FileCloser() {
        if (f) std::fclose(f);
    }
};

}  // namespace detail

// Images are channel-last [H x W x C] tensors with values in [0, 1].
// PNG storage quantizes to 8 bits per channel (round, clamp).

inline uint8_t quantize8(double v) {
    double q = std::round(v * 255.0);
    return static_cast<uint8_t>(std::clamp(q, 0.0, 255.0));
}

inline void write_png(const std::string& path, const Tensor& img) {
    if (img.rank() != 3 || (img.dim(2) != 3 && img.dim(2) != 1))
        throw DimensionError("write_png: expects [HxWx3] or [HxWx1], got " + shape_str(img.shape()));
    int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
    detail::FileCloser fc{std::fopen(path.c_str(), "wb")};
    if (!fc.f) throw DataError("write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) throw DataError("write_png: libpng init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("write_png: libpng error on " + path);
    }
    png_init_io(png, fc.f);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<uint8_t> row(static_cast<size_t>(w * c));
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t i = 0; i < w * c; ++i) row[static_cast<size_t>(i)] = quantize8(img.data()[y * w * c + i]);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline Tensor read_png(const std::string& path) {
    detail::FileCloser fc{std::fopen(path.c_str(), "rb")};
    if (!fc.f) throw DataError("read_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) throw DataError("read_png: libpng init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("read_png: libpng error on " + path);
    }
    png_init_io(png, fc.f);
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    png_byte color = png_get_color_type(png, info);
    png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    int64_t c = png_get_channels(png, info);
    if (c != 1 && c != 3) throw DataError("read_png: unsupported channel count in " + path);
    Tensor img(Shape{static_cast<int64_t>(h), static_cast<int64_t>(w), c});
    std::vector<uint8_t> row(static_cast<size_t>(w) * static_cast<size_t>(c));
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (size_t i = 0; i < row.size(); ++i)
            img.data()[static_cast<int64_t>(y) * w * c + static_cast<int64_t>(i)] = row[i] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline Tensor crop(const Tensor& img, int64_t y0, int64_t x0, int64_t ch, int64_t cw) {
    if (img.rank() != 3) throw DimensionError("crop: expects [HxWxC]");
    int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
    if (y0 < 0 || x0 < 0 || ch <= 0 || cw <= 0 || y0 + ch > h || x0 + cw > w)
        throw ParameterError("crop: window out of bounds");
    Tensor out(Shape{ch, cw, c});
    for (int64_t y = 0; y < ch; ++y)
        for (int64_t x = 0; x < cw; ++x)
            for (int64_t ci = 0; ci < c; ++ci)
                out.data()[(y * cw + x) * c + ci] = img.data()[((y0 + y) * w + (x0 + x)) * c + ci];
    return out;
}

inline Tensor resize_bilinear(const Tensor& img, int64_t oh, int64_t ow) {
    if (img.rank() != 3) throw DimensionError("resize_bilinear: expects [HxWxC]");
    if (oh <= 0 || ow <= 0) throw ParameterError("resize_bilinear: target must be positive");
    int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
    Tensor out(Shape{oh, ow, c});
    double sy = static_cast<double>(h) / static_cast<double>(oh);
    double sx = static_cast<double>(w) / static_cast<double>(ow);
    for (int64_t y = 0; y < oh; ++y) {
        double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        int64_t y0 = static_cast<int64_t>(std::floor(fy));
        double wy = fy - static_cast<double>(y0);
        int64_t y0c = std::clamp<int64_t>(y0, 0, h - 1);
        int64_t y1c = std::clamp<int64_t>(y0 + 1, 0, h - 1);
        for (int64_t x = 0; x < ow; ++x) {
            double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            int64_t x0 = static_cast<int64_t>(std::floor(fx));
            double wx = fx - static_cast<double>(x0);
            int64_t x0c = std::clamp<int64_t>(x0, 0, w - 1);
            int64_t x1c = std::clamp<int64_t>(x0 + 1, 0, w - 1);
            for (int64_t ci = 0; ci < c; ++ci) {
                double v00 = img.data()[(y0c * w + x0c) * c + ci];
                double v01 = img.data()[(y0c * w + x1c) * c + ci];
                double v10 = img.data()[(y1c * w + x0c) * c + ci];
                double v11 = img.data()[(y1c * w + x1c) * c + ci];
                out.data()[(y * ow + x) * c + ci] =
                    (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
            }
        }
    }
    return out;
}

inline Tensor flip_horizontal(const Tensor& img) {
    int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
    Tensor out(img.shape());
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t ci = 0; ci < c; ++ci)
                out.data()[(y * w + x) * c + ci] = img.data()[(y * w + (w - 1 - x)) * c + ci];
    return out;
}

inline Tensor flip_vertical(const Tensor& img) {
    int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
    Tensor out(img.shape());
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t ci = 0; ci < c; ++ci)
                out.data()[(y * w + x) * c + ci] = img.data()[((h - 1 - y) * w + x) * c + ci];
    return out;
}

inline Tensor adjust_brightness(const Tensor& img, double factor) {
    Tensor out(img.shape());
    for (int64_t i = 0; i < img.numel(); ++i) out.data()[i] = std::clamp(img.data()[i] * factor, 0.0, 1.0);
    return out;
}

}  // namespace duvsynth
