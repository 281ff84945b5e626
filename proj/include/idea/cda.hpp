// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "idea/autodiff.hpp"
#include "idea/errors.hpp"
#include "idea/ops.hpp"
#include "idea/parameter.hpp"

namespace idea {

/// Patch tokens of one modality laid out row-major as an (H·W)×C matrix.
template <typename Scalar>
struct LocalMap {
    MatrixX<Scalar> values;
    int height = 0;
    int width = 0;

    /// Token at spatial cell (row, col).
    auto at(int row, int col) const { return values.row(static_cast<Eigen::Index>(row) * width + col); }
};

template <typename Scalar>
struct TokenSplit {
    Eigen::Matrix<Scalar, 1, Eigen::Dynamic> pseudo;
    Eigen::Matrix<Scalar, 1, Eigen::Dynamic> cls;
    LocalMap<Scalar> local;
};

/// Splits an integrated feature laid out [pseudo, patch_1..patch_N, class]
/// into its global tokens and the H×W local map.
template <typename Derived>
TokenSplit<typename Derived::Scalar> split_tokens(const Eigen::MatrixBase<Derived>& features, int height, int width) {
    const Eigen::Index n_local = static_cast<Eigen::Index>(height) * width;
    if (height < 1 || width < 1 || features.rows() != n_local + 2)
        throw ShapeMismatch("split_tokens: expected " + std::to_string(n_local + 2) + " rows, got " +
                            std::to_string(features.rows()));
    TokenSplit<typename Derived::Scalar> out;
    out.pseudo = features.row(0);
    out.cls = features.row(n_local + 1);
    out.local.values = features.middleRows(1, n_local);
    out.local.height = height;
    out.local.width = width;
    return out;
}

/// align-corners map between pixel index and [-1, 1].
inline double pixel_to_normalized(double pixel, int extent) {
    return extent > 1 ? 2.0 * pixel / (extent - 1) - 1.0 : 0.0;
}

inline double normalized_to_pixel(double normalized, int extent) {
    return extent > 1 ? (normalized + 1.0) * 0.5 * (extent - 1) : 0.0;
}

/// Normalised centres of the non-overlapping kernel_h×kernel_w receptive
/// fields tiling an H×W map, one row [x, y] per cell in row-major order.
inline Eigen::MatrixXd reference_points(int height, int width, int kernel_h, int kernel_w) {
    const int hs = height / kernel_h;
    const int ws = width / kernel_w;
    Eigen::MatrixXd p(static_cast<Eigen::Index>(hs) * ws, 2);
    for (int a = 0; a < hs; ++a) {
        for (int b = 0; b < ws; ++b) {
            const double cy = a * kernel_h + 0.5 * (kernel_h - 1);
            const double cx = b * kernel_w + 0.5 * (kernel_w - 1);
            p(a * ws + b, 0) = pixel_to_normalized(cx, width);
            p(a * ws + b, 1) = pixel_to_normalized(cy, height);
        }
    }
    return p;
}

namespace detail {

/// Neighbour indices and fractional offsets for one sampling position.
/// i/j index columns/rows; at an exact integer coordinate the cell to the
/// right (below) is used, except on the last column (row).
struct BilinearCell {
    int i0, i1, j0, j1;
    double dx, dy;
};

inline BilinearCell bilinear_cell(double x_norm, double y_norm, int height, int width) {
    const double x = normalized_to_pixel(x_norm, width);
    const double y = normalized_to_pixel(y_norm, height);
    BilinearCell c{};
    c.i0 = std::clamp(static_cast<int>(std::floor(x)), 0, std::max(width - 2, 0));
    c.j0 = std::clamp(static_cast<int>(std::floor(y)), 0, std::max(height - 2, 0));
    c.i1 = std::min(c.i0 + 1, width - 1);
    c.j1 = std::min(c.j0 + 1, height - 1);
    c.dx = width > 1 ? x - c.i0 : 0.0;
    c.dy = height > 1 ? y - c.j0 : 0.0;
    return c;
}

}  // namespace detail

/// Bilinear sampling of a row-major (H·W)×C map at normalised positions
/// (N×2, columns x then y). Positions are expected in [-1, 1].
template <typename DerivedV, typename DerivedP>
MatrixX<typename DerivedV::Scalar> bilinear_sample(const Eigen::MatrixBase<DerivedV>& values, int height, int width,
                                                   const Eigen::MatrixBase<DerivedP>& positions) {
    using Scalar = typename DerivedV::Scalar;
    MatrixX<Scalar> out(positions.rows(), values.cols());
    for (Eigen::Index n = 0; n < positions.rows(); ++n) {
        const auto c = idea::detail::bilinear_cell(double(positions(n, 0)), double(positions(n, 1)), height, width);
        const Scalar dx = Scalar(c.dx), dy = Scalar(c.dy);
        const Scalar w00 = (1 - dx) * (1 - dy), w10 = dx * (1 - dy), w01 = (1 - dx) * dy, w11 = dx * dy;
        out.row(n) = w00 * values.row(c.j0 * width + c.i0) + w10 * values.row(c.j0 * width + c.i1) +
                     w01 * values.row(c.j1 * width + c.i0) + w11 * values.row(c.j1 * width + c.i1);
    }
    return out;
}

/// Sampling grid shared by the three modalities of one sample.
struct SamplingGrid {
    Eigen::MatrixXd reference;  // P, N_S×2
    Eigen::MatrixXd offsets;    // ΔP
    Eigen::MatrixXd positions;  // P̂ = clip(P + ΔP, -1, 1)
    double offset_scale = 0;    // k
    int rows = 0;               // H_S
    int cols = 0;               // W_S
};

namespace ad {

/// Batched bilinear sampling: `values` stacks `batch` maps of H·W rows,
/// `positions` stacks batch·n_points rows. Differentiable in both.
template <typename Scalar>
Var<Scalar> bilinear_sample(const Var<Scalar>& values, int height, int width, const Var<Scalar>& positions, int batch) {
    const Eigen::Index hw = static_cast<Eigen::Index>(height) * width;
    if (values.rows() != hw * batch || positions.cols() != 2 || positions.rows() % batch != 0)
        throw ShapeMismatch("bilinear_sample: batch layout mismatch");
    const Eigen::Index per = positions.rows() / batch;
    const auto& vv = values.value();
    const auto& pv = positions.value();
    MatrixX<Scalar> out(positions.rows(), values.cols());
    for (int b = 0; b < batch; ++b) {
        out.middleRows(b * per, per) = idea::bilinear_sample(vv.middleRows(b * hw, hw), height, width, pv.middleRows(b * per, per));
    }
    Tape<Scalar>* t = values.tape();
    return t->record(std::move(out), {values, positions}, [t, values, positions, height, width, batch, hw, per](const MatrixX<Scalar>& g) {
        const auto& vv = values.value();
        const auto& pv = positions.value();
        const bool need_v = t->requires_grad(values);
        const bool need_p = t->requires_grad(positions);
        MatrixX<Scalar> gv = need_v ? MatrixX<Scalar>::Zero(vv.rows(), vv.cols()) : MatrixX<Scalar>();
        MatrixX<Scalar> gp = need_p ? MatrixX<Scalar>::Zero(pv.rows(), 2) : MatrixX<Scalar>();
        const Scalar sx = width > 1 ? Scalar(0.5 * (width - 1)) : Scalar(0);
        const Scalar sy = height > 1 ? Scalar(0.5 * (height - 1)) : Scalar(0);
        for (int b = 0; b < batch; ++b) {
            for (Eigen::Index n = 0; n < per; ++n) {
                const Eigen::Index row = b * per + n;
                const auto c = idea::detail::bilinear_cell(double(pv(row, 0)), double(pv(row, 1)), height, width);
                const Scalar dx = Scalar(c.dx), dy = Scalar(c.dy);
                const Eigen::Index r00 = b * hw + c.j0 * width + c.i0, r10 = b * hw + c.j0 * width + c.i1;
                const Eigen::Index r01 = b * hw + c.j1 * width + c.i0, r11 = b * hw + c.j1 * width + c.i1;
                const auto go = g.row(row);
                if (need_v) {
                    gv.row(r00) += (1 - dx) * (1 - dy) * go;
                    gv.row(r10) += dx * (1 - dy) * go;
                    gv.row(r01) += (1 - dx) * dy * go;
                    gv.row(r11) += dx * dy * go;
                }
                if (need_p) {
                    const auto ddx = ((vv.row(r10) - vv.row(r00)) * (1 - dy) + (vv.row(r11) - vv.row(r01)) * dy).eval();
                    const auto ddy = ((vv.row(r01) - vv.row(r00)) * (1 - dx) + (vv.row(r11) - vv.row(r10)) * dx).eval();
                    gp(row, 0) += go.dot(ddx) * sx;
                    gp(row, 1) += go.dot(ddy) * sy;
                }
            }
        }
        if (need_v) t->accumulate(values, gv);
        if (need_p) t->accumulate(positions, gp);
    });
}

/// Depth-wise convolution with kernel == stride (non-overlapping windows),
/// no padding. `x` stacks `batch` maps of H·W rows; weight is (kh·kw)×C,
/// bias 1×C. Output stacks batch maps of (H/kh)·(W/kw) rows.
template <typename Scalar>
Var<Scalar> depthwise_conv(const Var<Scalar>& x, int height, int width, int kernel_h, int kernel_w,
                           const Var<Scalar>& weight, const Var<Scalar>* bias, int batch) {
    const Eigen::Index hw = static_cast<Eigen::Index>(height) * width;
    const Eigen::Index channels = x.cols();
    if (x.rows() != hw * batch || weight.rows() != kernel_h * kernel_w || weight.cols() != channels ||
        height % kernel_h != 0 || width % kernel_w != 0)
        throw ShapeMismatch("depthwise_conv: shape mismatch");
    const int hs = height / kernel_h, ws = width / kernel_w;
    const Eigen::Index per = static_cast<Eigen::Index>(hs) * ws;
    const auto& xv = x.value();
    const auto& wv = weight.value();
    MatrixX<Scalar> out = MatrixX<Scalar>::Zero(per * batch, channels);
    for (int b = 0; b < batch; ++b)
        for (int a = 0; a < hs; ++a)
            for (int c = 0; c < ws; ++c) {
                const Eigen::Index o = b * per + a * ws + c;
                for (int u = 0; u < kernel_h; ++u)
                    for (int v = 0; v < kernel_w; ++v) {
                        const Eigen::Index in = b * hw + static_cast<Eigen::Index>(a * kernel_h + u) * width + c * kernel_w + v;
                        out.row(o) += xv.row(in).cwiseProduct(wv.row(u * kernel_w + v));
                    }
                if (bias) out.row(o) += bias->value().row(0);
            }
    Tape<Scalar>* t = x.tape();
    std::vector<Var<Scalar>> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    const Var<Scalar> bias_var = bias ? *bias : Var<Scalar>();
    return t->record(std::move(out), inputs, [=](const MatrixX<Scalar>& g) {
        const auto& xv = x.value();
        const auto& wv = weight.value();
        const bool need_x = t->requires_grad(x);
        MatrixX<Scalar> gx = need_x ? MatrixX<Scalar>::Zero(xv.rows(), xv.cols()) : MatrixX<Scalar>();
        MatrixX<Scalar> gw = MatrixX<Scalar>::Zero(wv.rows(), wv.cols());
        for (int b = 0; b < batch; ++b)
            for (int a = 0; a < hs; ++a)
                for (int c = 0; c < ws; ++c) {
                    const Eigen::Index o = b * per + a * ws + c;
                    for (int u = 0; u < kernel_h; ++u)
                        for (int v = 0; v < kernel_w; ++v) {
                            const Eigen::Index in = b * hw + static_cast<Eigen::Index>(a * kernel_h + u) * width + c * kernel_w + v;
                            gw.row(u * kernel_w + v) += g.row(o).cwiseProduct(xv.row(in));
                            if (need_x) gx.row(in) += g.row(o).cwiseProduct(wv.row(u * kernel_w + v));
                        }
                }
        t->accumulate(weight, gw);
        if (need_x) t->accumulate(x, gx);
        if (bias_var.valid()) t->accumulate(bias_var, g.colwise().sum());
    });
}

}  // namespace ad

struct CdaConfig {
    int map_height = 8;     // H
    int map_width = 4;      // W
    int channels = 64;      // C
    int kernel_h = 4;       // mixer stride / kernel along H
    int kernel_w = 2;       // mixer stride / kernel along W
    double offset_scale = 5.0;  // k, in pixels of the local map
    int heads = 4;
    bool mixer_bias = true;

    int sampled_rows() const { return map_height / kernel_h; }
    int sampled_cols() const { return map_width / kernel_w; }
    int num_sampled() const { return sampled_rows() * sampled_cols(); }
    /// Multiplier turning generator output into normalised offsets.
    double offset_multiplier() const {
        const int denom = std::max(std::max(map_height, map_width) - 1, 1);
        return offset_scale * 2.0 / denom;
    }
    void validate() const;
};

/// Tape nodes produced by one batched CDA forward pass.
template <typename Scalar>
struct CdaTrace {
    ad::Var<Scalar> mixed;       // F̂_A, batch·N_S × C
    ad::Var<Scalar> offsets;     // ΔP, batch·N_S × 2
    ad::Var<Scalar> positions;   // P̂
    MatrixX<Scalar> reference;   // P tiled over the batch
    std::array<ad::Var<Scalar>, 3> sampler_positions;  // grid node consumed by each modality's sampler
    ad::Var<Scalar> sampled;     // F_S, batch·3N_S × C, per sample [RGB | NIR | TIR]
    ad::Var<Scalar> fused;       // F_CDA, batch·6 × C
};

/// Cooperative deformable aggregation: local mixer, shared offset grid,
/// bilinear sampling of every modality's map, cross-attention fusion.
class DeformableAggregation {
public:
    DeformableAggregation(ParameterStore& store, const CdaConfig& cfg, std::mt19937_64& rng, std::string prefix = "cda.");

    const CdaConfig& config() const { return cfg_; }
    const std::string& prefix() const { return prefix_; }

    /// Point-wise conv 3C→C, GELU, depth-wise conv (kernel = stride), GELU.
    template <typename Scalar>
    ad::Var<Scalar> local_mixer(ad::Tape<Scalar>& tape, const std::array<ad::Var<Scalar>, 3>& locals, int batch) const;

    /// Offsets from the generator and clipped positions, batch·N_S rows each.
    template <typename Scalar>
    std::pair<ad::Var<Scalar>, ad::Var<Scalar>> make_grid(ad::Tape<Scalar>& tape, const ad::Var<Scalar>& mixed, int batch,
                                                          MatrixX<Scalar>* reference_out = nullptr) const;

    /// F_G + CA(F_G, F_S) with F_G as query and F_S as key/value.
    template <typename Scalar>
    ad::Var<Scalar> fuse(ad::Tape<Scalar>& tape, const ad::Var<Scalar>& global, const ad::Var<Scalar>& sampled, int batch) const;

    /// Full pass. `locals` are the three modality maps (batch·H·W × C each),
    /// `global` is F_G stacked as batch·6 × C.
    template <typename Scalar>
    CdaTrace<Scalar> forward(ad::Tape<Scalar>& tape, const std::array<ad::Var<Scalar>, 3>& locals,
                             const ad::Var<Scalar>& global, int batch) const;

    // Single-sample convenience wrappers over plain matrices.
    Eigen::MatrixXd local_mixer(const std::array<LocalMap<double>, 3>& locals) const;
    SamplingGrid make_grid(const Eigen::MatrixXd& mixed) const;
    Eigen::MatrixXd fuse(const Eigen::MatrixXd& global, const Eigen::MatrixXd& sampled) const;

private:
    CdaConfig cfg_;
    std::string prefix_;
    ParameterStore* store_;
};

}  // namespace idea
