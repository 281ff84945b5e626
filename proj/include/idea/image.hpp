// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <string>

namespace idea {

/// H×W×3 image in [0, 1]; pixel (y, x) is row y·W + x of `pixels`.
struct Image {
    int height = 0;
    int width = 0;
    Eigen::MatrixXf pixels;  // (H·W)×3

    Image() = default;
    Image(int h, int w) : height(h), width(w), pixels(Eigen::MatrixXf::Zero(static_cast<Eigen::Index>(h) * w, 3)) {}

    auto at(int y, int x) { return pixels.row(static_cast<Eigen::Index>(y) * width + x); }
    auto at(int y, int x) const { return pixels.row(static_cast<Eigen::Index>(y) * width + x); }
};

/// 8-bit RGB PNG; values are clamped to [0, 1] and rounded.
void write_png(const std::string& path, const Image& image);
Image read_png(const std::string& path);

/// Rows are patches in row-major patch order; each row holds the patch's
/// pixels in (y, x, channel) order. Throws ShapeMismatch if the image does
/// not tile evenly.
Eigen::MatrixXf patchify(const Image& image, int patch_size);

}  // namespace idea
