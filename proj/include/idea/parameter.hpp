// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <map>
#include <random>
#include <string>

namespace idea {

/// A named trainable array. Master values and gradients are always kept in
/// double precision; forward passes may run in a narrower scalar type.
struct Parameter {
    std::string name;
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;
    bool trainable = true;
};

class ParameterStore {
public:
    using Container = std::map<std::string, Parameter>;

    Parameter& add(const std::string& name, Eigen::MatrixXd init);
    Parameter& add_normal(const std::string& name, Eigen::Index rows, Eigen::Index cols, double stddev,
                          std::mt19937_64& rng);
    Parameter& add_zeros(const std::string& name, Eigen::Index rows, Eigen::Index cols);
    Parameter& add_constant(const std::string& name, Eigen::Index rows, Eigen::Index cols, double value);

    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    Container& items() { return params_; }
    const Container& items() const { return params_; }

    void zero_grad();
    std::size_t scalar_count() const;

private:
    Container params_;
};

}  // namespace idea
