// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "idea/autodiff.hpp"
#include "idea/errors.hpp"

namespace idea {

/// Value and gradient of a scalar loss w.r.t. its matrix input.
template <typename Scalar>
struct LossEval {
    Scalar value = 0;
    MatrixX<Scalar> grad;
};

/// Label-smoothed cross-entropy, averaged over the batch.
/// Target distribution q = (1 - eps)·onehot + eps / K.
template <typename Derived>
LossEval<typename Derived::Scalar> label_smoothing_ce(const Eigen::MatrixBase<Derived>& logits, std::span<const int> labels,
                                                      double eps) {
    using Scalar = typename Derived::Scalar;
    const Eigen::Index batch = logits.rows();
    const Eigen::Index classes = logits.cols();
    if (static_cast<Eigen::Index>(labels.size()) != batch) throw ShapeMismatch("label_smoothing_ce: label count mismatch");
    if (eps < 0.0 || eps >= 1.0) throw std::invalid_argument("label_smoothing_ce: eps must be in [0, 1)");

    LossEval<Scalar> out;
    out.grad.resize(batch, classes);
    const Scalar off = Scalar(eps / static_cast<double>(classes));
    const Scalar on = Scalar(1.0 - eps) + off;
    Scalar total = 0;
    for (Eigen::Index b = 0; b < batch; ++b) {
        const int y = labels[static_cast<std::size_t>(b)];
        if (y < 0 || y >= classes) throw InvalidLabel("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
        const Scalar mx = logits.row(b).maxCoeff();
        const Scalar lse = mx + std::log((logits.row(b).array() - mx).exp().sum());
        Scalar row_loss = 0;
        for (Eigen::Index c = 0; c < classes; ++c) {
            const Scalar q = (c == y) ? on : off;
            const Scalar logp = logits(b, c) - lse;
            if (q != Scalar(0)) row_loss -= q * logp;
            out.grad(b, c) = (std::exp(logp) - q) / Scalar(batch);
        }
        total += row_loss;
    }
    out.value = total / Scalar(batch);
    return out;
}

/// Batch-hard triplet loss on unnormalised Euclidean distances: for every
/// anchor, hinge(max positive distance - min negative distance + margin),
/// averaged over anchors.
template <typename Derived>
LossEval<typename Derived::Scalar> batch_hard_triplet(const Eigen::MatrixBase<Derived>& features, std::span<const int> labels,
                                                      double margin) {
    using Scalar = typename Derived::Scalar;
    const Eigen::Index batch = features.rows();
    if (static_cast<Eigen::Index>(labels.size()) != batch) throw ShapeMismatch("batch_hard_triplet: label count mismatch");

    MatrixX<Scalar> dist(batch, batch);
    for (Eigen::Index i = 0; i < batch; ++i)
        for (Eigen::Index j = 0; j < batch; ++j) dist(i, j) = (features.row(i) - features.row(j)).norm();

    LossEval<Scalar> out;
    out.grad = MatrixX<Scalar>::Zero(batch, features.cols());
    Scalar total = 0;
    for (Eigen::Index a = 0; a < batch; ++a) {
        Eigen::Index hp = -1, hn = -1;
        for (Eigen::Index j = 0; j < batch; ++j) {
            if (j == a) continue;
            if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
                if (hp < 0 || dist(a, j) > dist(a, hp)) hp = j;
            } else if (hn < 0 || dist(a, j) < dist(a, hn)) {
                hn = j;
            }
        }
        if (hp < 0 || hn < 0) throw DegenerateBatch("anchor " + std::to_string(a) + " lacks a positive or a negative");
        const Scalar hinge = dist(a, hp) - dist(a, hn) + Scalar(margin);
        if (hinge <= Scalar(0)) continue;
        total += hinge;
        // d|x_a - x_b| / dx_a = (x_a - x_b) / |x_a - x_b|; zero sub-gradient at coincident points.
        if (dist(a, hp) > Scalar(0)) {
            const auto u = ((features.row(a) - features.row(hp)) / dist(a, hp)).eval();
            out.grad.row(a) += u;
            out.grad.row(hp) -= u;
        }
        if (dist(a, hn) > Scalar(0)) {
            const auto u = ((features.row(a) - features.row(hn)) / dist(a, hn)).eval();
            out.grad.row(a) -= u;
            out.grad.row(hn) += u;
        }
    }
    out.value = total / Scalar(batch);
    out.grad /= Scalar(batch);
    return out;
}

namespace ad {

template <typename Scalar>
Var<Scalar> label_smoothing_ce(const Var<Scalar>& logits, std::vector<int> labels, double eps) {
    auto eval = idea::label_smoothing_ce(logits.value(), labels, eps);
    Tape<Scalar>* t = logits.tape();
    MatrixX<Scalar> out(1, 1);
    out(0, 0) = eval.value;
    return t->record(std::move(out), {logits}, [t, logits, grad = std::move(eval.grad)](const MatrixX<Scalar>& g) {
        t->accumulate(logits, grad * g(0, 0));
    });
}

template <typename Scalar>
Var<Scalar> batch_hard_triplet(const Var<Scalar>& features, std::vector<int> labels, double margin) {
    auto eval = idea::batch_hard_triplet(features.value(), labels, margin);
    Tape<Scalar>* t = features.tape();
    MatrixX<Scalar> out(1, 1);
    out(0, 0) = eval.value;
    return t->record(std::move(out), {features}, [t, features, grad = std::move(eval.grad)](const MatrixX<Scalar>& g) {
        t->accumulate(features, grad * g(0, 0));
    });
}

}  // namespace ad
}  // namespace idea
