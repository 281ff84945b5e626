// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "idea/autodiff.hpp"

namespace idea::ad {

namespace detail {

inline void require(bool cond, const char* what) {
    if (!cond) throw std::invalid_argument(what);
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
    detail::require(a.cols() == b.rows(), "matmul: inner dimensions differ");
    Tape<Scalar>* t = a.tape();
    return t->record(a.value() * b.value(), {a, b}, [t, a, b](const MatrixX<Scalar>& g) {
        if (t->requires_grad(a)) t->accumulate(a, g * b.value().transpose());
        if (t->requires_grad(b)) t->accumulate(b, a.value().transpose() * g);
    });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    Tape<Scalar>* t = a.tape();
    return t->record(a.value() + b.value(), {a, b}, [t, a, b](const MatrixX<Scalar>& g) {
        t->accumulate(a, g);
        t->accumulate(b, g);
    });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    Tape<Scalar>* t = a.tape();
    return t->record(a.value() - b.value(), {a, b}, [t, a, b](const MatrixX<Scalar>& g) {
        t->accumulate(a, g);
        t->accumulate(b, -g);
    });
}

template <typename Scalar>
Var<Scalar> hadamard(const Var<Scalar>& a, const Var<Scalar>& b) {
    detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard: shape mismatch");
    Tape<Scalar>* t = a.tape();
    return t->record(a.value().cwiseProduct(b.value()), {a, b}, [t, a, b](const MatrixX<Scalar>& g) {
        if (t->requires_grad(a)) t->accumulate(a, g.cwiseProduct(b.value()));
        if (t->requires_grad(b)) t->accumulate(b, g.cwiseProduct(a.value()));
    });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
    Tape<Scalar>* t = a.tape();
    return t->record(a.value() * s, {a}, [t, a, s](const MatrixX<Scalar>& g) { t->accumulate(a, g * s); });
}

/// a + c for a constant matrix c of the same shape.
template <typename Scalar>
Var<Scalar> add_constant(const Var<Scalar>& a, const MatrixX<Scalar>& c) {
    detail::require(a.rows() == c.rows() && a.cols() == c.cols(), "add_constant: shape mismatch");
    Tape<Scalar>* t = a.tape();
    return t->record(a.value() + c, {a}, [t, a](const MatrixX<Scalar>& g) { t->accumulate(a, g); });
}

/// Adds a 1×n row to every row of a.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& row) {
    detail::require(row.rows() == 1 && row.cols() == a.cols(), "add_row: bias shape mismatch");
    Tape<Scalar>* t = a.tape();
    MatrixX<Scalar> out = a.value().rowwise() + row.value().row(0);
    return t->record(std::move(out), {a, row}, [t, a, row](const MatrixX<Scalar>& g) {
        t->accumulate(a, g);
        t->accumulate(row, g.colwise().sum());
    });
}

/// x·W (+ b). W is stored in×out, b as 1×out.
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w) {
    return matmul(x, w);
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
    detail::require(x.cols() == w.rows() && b.rows() == 1 && b.cols() == w.cols(), "linear: shape mismatch");
    Tape<Scalar>* t = x.tape();
    MatrixX<Scalar> out = x.value() * w.value();
    out.rowwise() += b.value().row(0);
    return t->record(std::move(out), {x, w, b}, [t, x, w, b](const MatrixX<Scalar>& g) {
        if (t->requires_grad(x)) t->accumulate(x, g * w.value().transpose());
        if (t->requires_grad(w)) t->accumulate(w, x.value().transpose() * g);
        t->accumulate(b, g.colwise().sum());
    });
}

template <typename Scalar>
Scalar gelu_value(Scalar x) {
    return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(std::numbers::sqrt2 / 2)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(std::numbers::sqrt2 / 2)));
    const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * Scalar(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + x * pdf;
}

/// Exact (erf) GELU.
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
    Tape<Scalar>* t = a.tape();
    MatrixX<Scalar> out = a.value().unaryExpr([](Scalar x) { return gelu_value(x); });
    return t->record(std::move(out), {a}, [t, a](const MatrixX<Scalar>& g) {
        t->accumulate(a, g.cwiseProduct(a.value().unaryExpr([](Scalar x) { return gelu_derivative(x); })));
    });
}

/// Row-wise layer normalisation with affine gain/bias (1×n each).
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       Scalar eps = Scalar(1e-5)) {
    const Eigen::Index n = x.cols();
    detail::require(gamma.cols() == n && beta.cols() == n, "layer_norm: affine shape mismatch");
    Tape<Scalar>* t = x.tape();
    const auto& xv = x.value();
    auto xhat = std::make_shared<MatrixX<Scalar>>(xv.rows(), n);
    auto inv_std = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        const Scalar mean = xv.row(r).mean();
        const Scalar var = (xv.row(r).array() - mean).square().mean();
        (*inv_std)(r) = Scalar(1) / std::sqrt(var + eps);
        xhat->row(r) = (xv.row(r).array() - mean) * (*inv_std)(r);
    }
    MatrixX<Scalar> out = xhat->array().rowwise() * gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    return t->record(std::move(out), {x, gamma, beta}, [t, x, gamma, beta, xhat, inv_std, n](const MatrixX<Scalar>& g) {
        t->accumulate(gamma, g.cwiseProduct(*xhat).colwise().sum());
        t->accumulate(beta, g.colwise().sum());
        if (!t->requires_grad(x)) return;
        MatrixX<Scalar> gx_hat = g.array().rowwise() * gamma.value().row(0).array();
        MatrixX<Scalar> gx(g.rows(), n);
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            const Scalar m1 = gx_hat.row(r).mean();
            const Scalar m2 = gx_hat.row(r).cwiseProduct(xhat->row(r)).mean();
            gx.row(r) = ((gx_hat.row(r).array() - m1) - xhat->row(r).array() * m2) * (*inv_std)(r);
        }
        t->accumulate(x, gx);
    });
}

/// Multi-head scaled dot-product attention over a batch of independent
/// segments stacked along the rows. q has sum(q_lens) rows, k and v have
/// sum(k_lens) rows; all share the same width, split into `heads` equal slices.
/// With `causal`, query i of a segment only sees keys j ≤ i.
template <typename Scalar>
Var<Scalar> attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, int heads,
                      const std::vector<Eigen::Index>& q_lens, const std::vector<Eigen::Index>& k_lens,
                      bool causal = false) {
    const Eigen::Index width = q.cols();
    detail::require(k.cols() == width && v.cols() == width, "attention: width mismatch");
    detail::require(heads >= 1 && width % heads == 0, "attention: width not divisible by heads");
    detail::require(q_lens.size() == k_lens.size(), "attention: segment count mismatch");
    Eigen::Index q_total = 0, k_total = 0;
    for (std::size_t s = 0; s < q_lens.size(); ++s) {
        detail::require(!causal || q_lens[s] == k_lens[s], "attention: causal mask needs square segments");
        q_total += q_lens[s];
        k_total += k_lens[s];
    }
    detail::require(q.rows() == q_total && k.rows() == k_total && v.rows() == k_total,
                    "attention: segment lengths do not match row counts");

    const Eigen::Index dh = width / heads;
    const Scalar inv_sqrt = Scalar(1) / std::sqrt(Scalar(dh));
    auto probs = std::make_shared<std::vector<MatrixX<Scalar>>>();
    probs->reserve(q_lens.size() * static_cast<std::size_t>(heads));
    MatrixX<Scalar> out(q_total, width);
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    Eigen::Index qo = 0, ko = 0;
    for (std::size_t s = 0; s < q_lens.size(); ++s) {
        const Eigen::Index tq = q_lens[s], tk = k_lens[s];
        for (int h = 0; h < heads; ++h) {
            MatrixX<Scalar> scores = qv.block(qo, h * dh, tq, dh) * kv.block(ko, h * dh, tk, dh).transpose() * inv_sqrt;
            for (Eigen::Index i = 0; i < tq; ++i) {
                if (causal) {
                    for (Eigen::Index j = i + 1; j < tk; ++j) scores(i, j) = -std::numeric_limits<Scalar>::infinity();
                }
                const Scalar mx = scores.row(i).maxCoeff();
                scores.row(i) = (scores.row(i).array() - mx).exp();
                scores.row(i) /= scores.row(i).sum();
            }
            out.block(qo, h * dh, tq, dh) = scores * vv.block(ko, h * dh, tk, dh);
            probs->push_back(std::move(scores));
        }
        qo += tq;
        ko += tk;
    }

    Tape<Scalar>* t = q.tape();
    return t->record(std::move(out), {q, k, v}, [t, q, k, v, heads, q_lens, k_lens, probs, dh, inv_sqrt](const MatrixX<Scalar>& g) {
        const auto& qv = q.value();
        const auto& kv = k.value();
        const auto& vv = v.value();
        MatrixX<Scalar> gq = MatrixX<Scalar>::Zero(qv.rows(), qv.cols());
        MatrixX<Scalar> gk = MatrixX<Scalar>::Zero(kv.rows(), kv.cols());
        MatrixX<Scalar> gv = MatrixX<Scalar>::Zero(vv.rows(), vv.cols());
        Eigen::Index qo = 0, ko = 0;
        std::size_t idx = 0;
        for (std::size_t s = 0; s < q_lens.size(); ++s) {
            const Eigen::Index tq = q_lens[s], tk = k_lens[s];
            for (int h = 0; h < heads; ++h, ++idx) {
                const MatrixX<Scalar>& p = (*probs)[idx];
                const auto go = g.block(qo, h * dh, tq, dh);
                gv.block(ko, h * dh, tk, dh) += p.transpose() * go;
                MatrixX<Scalar> gp = go * vv.block(ko, h * dh, tk, dh).transpose();
                Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_dot = gp.cwiseProduct(p).rowwise().sum();
                MatrixX<Scalar> gs = p.cwiseProduct(gp.colwise() - row_dot) * inv_sqrt;
                gq.block(qo, h * dh, tq, dh) += gs * kv.block(ko, h * dh, tk, dh);
                gk.block(ko, h * dh, tk, dh) += gs.transpose() * qv.block(qo, h * dh, tq, dh);
            }
            qo += tq;
            ko += tk;
        }
        t->accumulate(q, gq);
        t->accumulate(k, gk);
        t->accumulate(v, gv);
    });
}

template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts) {
    detail::require(!parts.empty(), "concat_rows: no inputs");
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    for (const auto& p : parts) {
        detail::require(p.cols() == cols, "concat_rows: column mismatch");
        rows += p.rows();
    }
    MatrixX<Scalar> out(rows, cols);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        out.middleRows(off, p.rows()) = p.value();
        off += p.rows();
    }
    Tape<Scalar>* t = parts.front().tape();
    return t->record(std::move(out), parts, [t, parts](const MatrixX<Scalar>& g) {
        Eigen::Index off = 0;
        for (const auto& p : parts) {
            t->accumulate(p, g.middleRows(off, p.rows()));
            off += p.rows();
        }
    });
}

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
    detail::require(!parts.empty(), "concat_cols: no inputs");
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts.front().rows();
    for (const auto& p : parts) {
        detail::require(p.rows() == rows, "concat_cols: row mismatch");
        cols += p.cols();
    }
    MatrixX<Scalar> out(rows, cols);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        out.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    Tape<Scalar>* t = parts.front().tape();
    return t->record(std::move(out), parts, [t, parts](const MatrixX<Scalar>& g) {
        Eigen::Index off = 0;
        for (const auto& p : parts) {
            t->accumulate(p, g.middleCols(off, p.cols()));
            off += p.cols();
        }
    });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
    detail::require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
    Tape<Scalar>* t = a.tape();
    return t->record(a.value().middleRows(start, count), {a}, [t, a, start, count](const MatrixX<Scalar>& g) {
        MatrixX<Scalar> full = MatrixX<Scalar>::Zero(a.rows(), a.cols());
        full.middleRows(start, count) = g;
        t->accumulate(a, full);
    });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
    detail::require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
    Tape<Scalar>* t = a.tape();
    return t->record(a.value().middleCols(start, count), {a}, [t, a, start, count](const MatrixX<Scalar>& g) {
        MatrixX<Scalar> full = MatrixX<Scalar>::Zero(a.rows(), a.cols());
        full.middleCols(start, count) = g;
        t->accumulate(a, full);
    });
}

/// out.row(i) = a.row(index[i]); repeated indices scatter-add on the way back.
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& a, std::vector<Eigen::Index> index) {
    MatrixX<Scalar> out(static_cast<Eigen::Index>(index.size()), a.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        detail::require(index[i] >= 0 && index[i] < a.rows(), "gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
    }
    Tape<Scalar>* t = a.tape();
    return t->record(std::move(out), {a}, [t, a, index = std::move(index)](const MatrixX<Scalar>& g) {
        MatrixX<Scalar> full = MatrixX<Scalar>::Zero(a.rows(), a.cols());
        for (std::size_t i = 0; i < index.size(); ++i) full.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
        t->accumulate(a, full);
    });
}

/// out.row(i) = mean of a's rows listed in groups[i].
template <typename Scalar>
Var<Scalar> mean_rows(const Var<Scalar>& a, std::vector<std::vector<Eigen::Index>> groups) {
    MatrixX<Scalar> out = MatrixX<Scalar>::Zero(static_cast<Eigen::Index>(groups.size()), a.cols());
    for (std::size_t i = 0; i < groups.size(); ++i) {
        detail::require(!groups[i].empty(), "mean_rows: empty group");
        for (Eigen::Index r : groups[i]) {
            detail::require(r >= 0 && r < a.rows(), "mean_rows: index out of range");
            out.row(static_cast<Eigen::Index>(i)) += a.value().row(r);
        }
        out.row(static_cast<Eigen::Index>(i)) /= Scalar(groups[i].size());
    }
    Tape<Scalar>* t = a.tape();
    return t->record(std::move(out), {a}, [t, a, groups = std::move(groups)](const MatrixX<Scalar>& g) {
        MatrixX<Scalar> full = MatrixX<Scalar>::Zero(a.rows(), a.cols());
        for (std::size_t i = 0; i < groups.size(); ++i) {
            const Scalar w = Scalar(1) / Scalar(groups[i].size());
            for (Eigen::Index r : groups[i]) full.row(r) += w * g.row(static_cast<Eigen::Index>(i));
        }
        t->accumulate(a, full);
    });
}

/// Elementwise clamp to [lo, hi]. Gradient passes where lo ≤ x ≤ hi.
template <typename Scalar>
Var<Scalar> clip(const Var<Scalar>& a, Scalar lo, Scalar hi) {
    Tape<Scalar>* t = a.tape();
    return t->record(a.value().cwiseMax(lo).cwiseMin(hi), {a}, [t, a, lo, hi](const MatrixX<Scalar>& g) {
        t->accumulate(a, g.binaryExpr(a.value(), [lo, hi](Scalar gi, Scalar x) {
            return (x >= lo && x <= hi) ? gi : Scalar(0);
        }));
    });
}

/// Multiplies by a fixed mask (used to replay a recorded dropout pattern).
template <typename Scalar>
Var<Scalar> apply_mask(const Var<Scalar>& a, MatrixX<Scalar> mask) {
    detail::require(mask.rows() == a.rows() && mask.cols() == a.cols(), "apply_mask: shape mismatch");
    Tape<Scalar>* t = a.tape();
    MatrixX<Scalar> out = a.value().cwiseProduct(mask);
    return t->record(std::move(out), {a}, [t, a, mask = std::move(mask)](const MatrixX<Scalar>& g) {
        t->accumulate(a, g.cwiseProduct(mask));
    });
}

/// Inverted dropout. Identity when the tape is not in training mode or p == 0.
/// When `mask_out` is given, the scaled keep-mask used is written there.
template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& a, double p, MatrixX<Scalar>* mask_out = nullptr) {
    Tape<Scalar>* t = a.tape();
    if (!t->training() || p <= 0.0) {
        if (mask_out) *mask_out = MatrixX<Scalar>::Ones(a.rows(), a.cols());
        return a;
    }
    std::bernoulli_distribution keep(1.0 - p);
    MatrixX<Scalar> mask(a.rows(), a.cols());
    const Scalar s = Scalar(1.0 / (1.0 - p));
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
        for (Eigen::Index i = 0; i < mask.rows(); ++i) mask(i, j) = keep(t->rng()) ? s : Scalar(0);
    if (mask_out) *mask_out = mask;
    return apply_mask(a, std::move(mask));
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
    Tape<Scalar>* t = a.tape();
    MatrixX<Scalar> out(1, 1);
    out(0, 0) = a.value().sum();
    return t->record(std::move(out), {a}, [t, a](const MatrixX<Scalar>& g) {
        t->accumulate(a, MatrixX<Scalar>::Constant(a.rows(), a.cols(), g(0, 0)));
    });
}

}  // namespace idea::ad
