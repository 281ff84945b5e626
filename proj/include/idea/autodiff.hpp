// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <stdexcept>
#include <unordered_map>
#include <utility>

#include "idea/parameter.hpp"

namespace idea {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

namespace ad {

template <typename Scalar>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
template <typename Scalar>
class Var {
public:
    Var() = default;
    Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

    const MatrixX<Scalar>& value() const { return tape_->value(*this); }
    const MatrixX<Scalar>& grad() const { return tape_->grad(*this); }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }

    Tape<Scalar>* tape() const { return tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

    friend bool operator==(const Var& a, const Var& b) { return a.tape_ == b.tape_ && a.id_ == b.id_; }

private:
    Tape<Scalar>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode recording of a computation over dense Eigen matrices.
///
/// Nodes are appended in evaluation order, so walking them backwards is a
/// valid topological order. Parameters are mapped to one leaf per tape; after
/// backward() their gradients can be flushed (cast to double) into the store.
template <typename Scalar>
class Tape {
public:
    using Matrix = MatrixX<Scalar>;
    using Backward = std::function<void(const Matrix&)>;

    explicit Tape(bool training = false, std::uint64_t seed = 0) : training_(training), rng_(seed) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<Scalar> constant(Matrix value) { return push(std::move(value), false, nullptr, nullptr); }
    Var<Scalar> variable(Matrix value) { return push(std::move(value), true, nullptr, nullptr); }

    Var<Scalar> param(Parameter& p) {
        if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<Scalar>(this, it->second);
        Var<Scalar> v = push(p.value.template cast<Scalar>(), p.trainable && grad_enabled_, nullptr, &p);
        param_nodes_.emplace(&p, v.id());
        return v;
    }

    /// Records an op output. The node needs a gradient iff any input does.
    template <typename Inputs>
    Var<Scalar> record(Matrix value, const Inputs& inputs, Backward backward) {
        bool needs = false;
        for (const auto& in : inputs) needs = needs || requires_grad(in);
        return push(std::move(value), needs, needs ? std::move(backward) : Backward{}, nullptr);
    }
    Var<Scalar> record(Matrix value, std::initializer_list<Var<Scalar>> inputs, Backward backward) {
        return record<std::initializer_list<Var<Scalar>>>(std::move(value), inputs, std::move(backward));
    }

    bool requires_grad(const Var<Scalar>& v) const { return nodes_[v.id()].requires_grad; }
    const Matrix& value(const Var<Scalar>& v) const { return nodes_[v.id()].value; }
    const Matrix& grad(const Var<Scalar>& v) const { return nodes_[v.id()].grad; }

    template <typename Expr>
    void accumulate(const Var<Scalar>& v, const Expr& g) {
        Node& n = nodes_[v.id()];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    void backward(const Var<Scalar>& root) {
        if (value(root).size() != 1) throw std::invalid_argument("backward: root must be a scalar");
        backward(root, Matrix::Ones(1, 1));
    }

    void backward(const Var<Scalar>& root, const Matrix& seed) {
        accumulate(root, seed);
        for (std::size_t i = root.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
            n.backward(n.grad);
        }
    }

    /// Adds leaf gradients of every parameter used on this tape into Parameter::grad.
    void flush_param_grads() const {
        for (const auto& [p, id] : param_nodes_) {
            const Node& n = nodes_[id];
            if (!n.requires_grad || n.grad.size() == 0) continue;
            if (p->grad.size() == 0) p->grad = Eigen::MatrixXd::Zero(p->value.rows(), p->value.cols());
            p->grad += n.grad.template cast<double>();
        }
    }

    bool training() const { return training_; }
    /// When disabled, parameters enter as constants and nothing is recorded for backward.
    void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
    std::mt19937_64& rng() { return rng_; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Backward backward;
        Parameter* param = nullptr;
    };

    Var<Scalar> push(Matrix value, bool requires_grad, Backward backward, Parameter* param) {
        nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, std::move(backward), param});
        return Var<Scalar>(this, nodes_.size() - 1);
    }

    std::deque<Node> nodes_;
    std::unordered_map<Parameter*, std::size_t> param_nodes_;
    bool training_;
    bool grad_enabled_ = true;
    std::mt19937_64 rng_;
};

}  // namespace ad
}  // namespace idea
