// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/parameter.hpp"

#include <stdexcept>

namespace idea {

Parameter& ParameterStore::add(const std::string& name, Eigen::MatrixXd init) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw std::invalid_argument("duplicate parameter: " + name);
    it->second.name = name;
    it->second.grad = Eigen::MatrixXd::Zero(init.rows(), init.cols());
    it->second.value = std::move(init);
    return it->second;
}

Parameter& ParameterStore::add_normal(const std::string& name, Eigen::Index rows, Eigen::Index cols, double stddev,
                                      std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
    return add(name, std::move(m));
}

Parameter& ParameterStore::add_zeros(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    return add(name, Eigen::MatrixXd::Zero(rows, cols));
}

Parameter& ParameterStore::add_constant(const std::string& name, Eigen::Index rows, Eigen::Index cols, double value) {
    return add(name, Eigen::MatrixXd::Constant(rows, cols, value));
}

Parameter& ParameterStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

const Parameter& ParameterStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

void ParameterStore::zero_grad() {
    for (auto& [_, p] : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
}

}  // namespace idea
