// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "idea/errors.hpp"

namespace idea {
namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::string& path, const Image& image) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IOError("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IOError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IOError("libpng error while writing " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<std::size_t>(image.width) * 3);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = std::clamp(image.at(y, x)(c), 0.0f, 1.0f);
                row[static_cast<std::size_t>(x) * 3 + c] = static_cast<png_byte>(std::lround(v * 255.0f));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IOError("cannot open image: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IOError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IOError("libpng error while reading " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const png_byte color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    Image image(height, width);
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    for (int y = 0; y < height; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c) image.at(y, x)(c) = row[static_cast<std::size_t>(x) * 3 + c] / 255.0f;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return image;
}

Eigen::MatrixXf patchify(const Image& image, int patch_size) {
    if (patch_size < 1 || image.height % patch_size != 0 || image.width % patch_size != 0)
        throw ShapeMismatch("patchify: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                            " not divisible by patch " + std::to_string(patch_size));
    const int gh = image.height / patch_size, gw = image.width / patch_size;
    Eigen::MatrixXf out(static_cast<Eigen::Index>(gh) * gw, static_cast<Eigen::Index>(patch_size) * patch_size * 3);
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px) {
            Eigen::Index col = 0;
            for (int y = 0; y < patch_size; ++y)
                for (int x = 0; x < patch_size; ++x)
                    for (int c = 0; c < 3; ++c) out(py * gw + px, col++) = image.at(py * patch_size + y, px * patch_size + x)(c);
        }
    return out;
}

}  // namespace idea
