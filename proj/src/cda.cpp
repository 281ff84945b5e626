// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/cda.hpp"

#include <cmath>

namespace idea {

void CdaConfig::validate() const {
    if (map_height < 1 || map_width < 1 || channels < 1 || kernel_h < 1 || kernel_w < 1 || heads < 1)
        throw ConfigError("cda: all dimensions must be >= 1");
    if (map_height % kernel_h != 0 || map_width % kernel_w != 0)
        throw ConfigError("cda: mixer kernel must tile the local map");
    if (channels % heads != 0) throw ConfigError("cda: channels must be divisible by heads");
    if (!(offset_scale > 0)) throw ConfigError("cda: offset scale k must be > 0");
}

DeformableAggregation::DeformableAggregation(ParameterStore& store, const CdaConfig& cfg, std::mt19937_64& rng,
                                             std::string prefix)
    : cfg_(cfg), prefix_(std::move(prefix)), store_(&store) {
    cfg_.validate();
    const int c = cfg_.channels;
    const int taps = cfg_.kernel_h * cfg_.kernel_w;
    store.add_normal(prefix_ + "mixer.pw.weight", 3 * c, c, 1.0 / std::sqrt(3.0 * c), rng);
    store.add_normal(prefix_ + "mixer.dw.weight", taps, c, 1.0 / std::sqrt(double(taps)), rng);
    if (cfg_.mixer_bias) {
        store.add_zeros(prefix_ + "mixer.pw.bias", 1, c);
        store.add_zeros(prefix_ + "mixer.dw.bias", 1, c);
    }
    // Zero generator: training starts from the reference grid.
    store.add_zeros(prefix_ + "offset.weight", c, 2);
    store.add_zeros(prefix_ + "offset.bias", 1, 2);
    for (const char* name : {"q", "k", "v"}) {
        store.add_normal(prefix_ + "attn." + name + ".weight", c, c, 1.0 / std::sqrt(double(c)), rng);
        store.add_zeros(prefix_ + "attn." + name + ".bias", 1, c);
    }
    store.add_normal(prefix_ + "attn.out.weight", c, c, 0.5 / std::sqrt(double(c)), rng);
    store.add_zeros(prefix_ + "attn.out.bias", 1, c);
}

template <typename Scalar>
ad::Var<Scalar> DeformableAggregation::local_mixer(ad::Tape<Scalar>& tape, const std::array<ad::Var<Scalar>, 3>& locals,
                                                   int batch) const {
    const Eigen::Index hw = static_cast<Eigen::Index>(cfg_.map_height) * cfg_.map_width;
    for (const auto& l : locals)
        if (l.rows() != hw * batch || l.cols() != cfg_.channels) throw ShapeMismatch("local_mixer: local map shape mismatch");
    auto x = ad::concat_cols<Scalar>({locals[0], locals[1], locals[2]});
    auto pw_w = tape.param(store_->at(prefix_ + "mixer.pw.weight"));
    x = cfg_.mixer_bias ? ad::linear(x, pw_w, tape.param(store_->at(prefix_ + "mixer.pw.bias"))) : ad::linear(x, pw_w);
    x = ad::gelu(x);
    auto dw_w = tape.param(store_->at(prefix_ + "mixer.dw.weight"));
    ad::Var<Scalar> dw_b;
    if (cfg_.mixer_bias) dw_b = tape.param(store_->at(prefix_ + "mixer.dw.bias"));
    x = ad::depthwise_conv(x, cfg_.map_height, cfg_.map_width, cfg_.kernel_h, cfg_.kernel_w, dw_w,
                           cfg_.mixer_bias ? &dw_b : nullptr, batch);
    return ad::gelu(x);
}

template <typename Scalar>
std::pair<ad::Var<Scalar>, ad::Var<Scalar>> DeformableAggregation::make_grid(ad::Tape<Scalar>& tape, const ad::Var<Scalar>& mixed,
                                                                             int batch, MatrixX<Scalar>* reference_out) const {
    const Eigen::Index ns = cfg_.num_sampled();
    if (mixed.rows() != ns * batch || mixed.cols() != cfg_.channels) throw ShapeMismatch("make_grid: mixed feature shape mismatch");
    const Eigen::MatrixXd ref = reference_points(cfg_.map_height, cfg_.map_width, cfg_.kernel_h, cfg_.kernel_w);
    MatrixX<Scalar> tiled(ns * batch, 2);
    for (int b = 0; b < batch; ++b) tiled.middleRows(b * ns, ns) = ref.cast<Scalar>();
    auto raw = ad::linear(mixed, tape.param(store_->at(prefix_ + "offset.weight")), tape.param(store_->at(prefix_ + "offset.bias")));
    auto offsets = ad::scale(raw, Scalar(cfg_.offset_multiplier()));
    auto positions = ad::clip(ad::add_constant(offsets, tiled), Scalar(-1), Scalar(1));
    if (reference_out) *reference_out = std::move(tiled);
    return {offsets, positions};
}

template <typename Scalar>
ad::Var<Scalar> DeformableAggregation::fuse(ad::Tape<Scalar>& tape, const ad::Var<Scalar>& global, const ad::Var<Scalar>& sampled,
                                            int batch) const {
    const Eigen::Index ns3 = 3 * static_cast<Eigen::Index>(cfg_.num_sampled());
    if (global.rows() != 6 * batch || global.cols() != cfg_.channels || sampled.rows() != ns3 * batch ||
        sampled.cols() != cfg_.channels)
        throw ShapeMismatch("fuse: expected F_G 6×C and F_S 3N_S×C per sample");
    auto p = [&](const std::string& n) { return tape.param(store_->at(prefix_ + "attn." + n)); };
    auto q = ad::linear(global, p("q.weight"), p("q.bias"));
    auto k = ad::linear(sampled, p("k.weight"), p("k.bias"));
    auto v = ad::linear(sampled, p("v.weight"), p("v.bias"));
    std::vector<Eigen::Index> q_lens(static_cast<std::size_t>(batch), 6), k_lens(static_cast<std::size_t>(batch), ns3);
    auto attended = ad::attention(q, k, v, cfg_.heads, q_lens, k_lens);
    return ad::add(global, ad::linear(attended, p("out.weight"), p("out.bias")));
}

template <typename Scalar>
CdaTrace<Scalar> DeformableAggregation::forward(ad::Tape<Scalar>& tape, const std::array<ad::Var<Scalar>, 3>& locals,
                                                const ad::Var<Scalar>& global, int batch) const {
    CdaTrace<Scalar> trace;
    trace.mixed = local_mixer(tape, locals, batch);
    std::tie(trace.offsets, trace.positions) = make_grid(tape, trace.mixed, batch, &trace.reference);
    std::vector<ad::Var<Scalar>> per_modality;
    for (std::size_t m = 0; m < 3; ++m) {
        trace.sampler_positions[m] = trace.positions;
        per_modality.push_back(
            ad::bilinear_sample(locals[m], cfg_.map_height, cfg_.map_width, trace.sampler_positions[m], batch));
    }
    const Eigen::Index ns = cfg_.num_sampled();
    std::vector<Eigen::Index> order;
    order.reserve(static_cast<std::size_t>(3 * ns * batch));
    for (int b = 0; b < batch; ++b)
        for (Eigen::Index m = 0; m < 3; ++m)
            for (Eigen::Index n = 0; n < ns; ++n) order.push_back(m * ns * batch + b * ns + n);
    trace.sampled = ad::gather_rows(ad::concat_rows(per_modality), std::move(order));
    trace.fused = fuse(tape, global, trace.sampled, batch);
    return trace;
}

Eigen::MatrixXd DeformableAggregation::local_mixer(const std::array<LocalMap<double>, 3>& locals) const {
    ad::Tape<double> tape;
    std::array<ad::Var<double>, 3> vars;
    for (std::size_t m = 0; m < 3; ++m) {
        if (locals[m].height != cfg_.map_height || locals[m].width != cfg_.map_width)
            throw ShapeMismatch("local_mixer: local map dims differ from configuration");
        vars[m] = tape.constant(locals[m].values);
    }
    return local_mixer(tape, vars, 1).value();
}

SamplingGrid DeformableAggregation::make_grid(const Eigen::MatrixXd& mixed) const {
    ad::Tape<double> tape;
    Eigen::MatrixXd ref;
    auto [offsets, positions] = make_grid(tape, tape.constant(mixed), 1, &ref);
    SamplingGrid grid;
    grid.reference = std::move(ref);
    grid.offsets = offsets.value();
    grid.positions = positions.value();
    grid.offset_scale = cfg_.offset_scale;
    grid.rows = cfg_.sampled_rows();
    grid.cols = cfg_.sampled_cols();
    return grid;
}

Eigen::MatrixXd DeformableAggregation::fuse(const Eigen::MatrixXd& global, const Eigen::MatrixXd& sampled) const {
    ad::Tape<double> tape;
    return fuse(tape, tape.constant(global), tape.constant(sampled), 1).value();
}

#define IDEA_INSTANTIATE_CDA(S)                                                                                          \
    template ad::Var<S> DeformableAggregation::local_mixer<S>(ad::Tape<S>&, const std::array<ad::Var<S>, 3>&, int) const; \
    template std::pair<ad::Var<S>, ad::Var<S>> DeformableAggregation::make_grid<S>(ad::Tape<S>&, const ad::Var<S>&, int,  \
                                                                                   MatrixX<S>*) const;                     \
    template ad::Var<S> DeformableAggregation::fuse<S>(ad::Tape<S>&, const ad::Var<S>&, const ad::Var<S>&, int) const;    \
    template CdaTrace<S> DeformableAggregation::forward<S>(ad::Tape<S>&, const std::array<ad::Var<S>, 3>&,                \
                                                           const ad::Var<S>&, int) const;

IDEA_INSTANTIATE_CDA(float)
IDEA_INSTANTIATE_CDA(double)

#undef IDEA_INSTANTIATE_CDA

}  // namespace idea
