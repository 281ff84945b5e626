// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "idea/cda.hpp"
#include "test_support.hpp"

using namespace idea;
using idea::testing::gradient_check;
using idea::testing::random_matrix;
using idea::testing::uniform_matrix;
using idea::testing::weighted_sum;

namespace {

// Σ over all pixels of tent(x - i)·tent(y - j)·value(j, i)
Eigen::RowVectorXd tent_oracle(const Eigen::MatrixXd& values, int h, int w, double xn, double yn) {
    const double x = (xn + 1) / 2 * (w - 1), y = (yn + 1) / 2 * (h - 1);
    Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(values.cols());
    for (int j = 0; j < h; ++j)
        for (int i = 0; i < w; ++i) {
            const double wt = std::max(0.0, 1 - std::abs(x - i)) * std::max(0.0, 1 - std::abs(y - j));
            if (wt > 0) out += wt * values.row(j * w + i);
        }
    return out;
}

// nested-loop reference of point-wise conv, GELU, depth-wise conv, GELU
Eigen::MatrixXd mixer_oracle(const std::array<Eigen::MatrixXd, 3>& locals, const ParameterStore& s, const CdaConfig& cfg) {
    const int c = cfg.channels, h = cfg.map_height, w = cfg.map_width;
    auto gelu = [](double x) { return 0.5 * x * (1 + std::erf(x / std::sqrt(2.0))); };
    const auto& pw = s.at("cda.mixer.pw.weight").value;
    const auto& pb = s.at("cda.mixer.pw.bias").value;
    const auto& dw = s.at("cda.mixer.dw.weight").value;
    const auto& db = s.at("cda.mixer.dw.bias").value;
    Eigen::MatrixXd mid(h * w, c);
    for (int p = 0; p < h * w; ++p)
        for (int o = 0; o < c; ++o) {
            double acc = pb(0, o);
            for (int m = 0; m < 3; ++m)
                for (int i = 0; i < c; ++i) acc += locals[m](p, i) * pw(m * c + i, o);
            mid(p, o) = gelu(acc);
        }
    const int hs = cfg.sampled_rows(), ws = cfg.sampled_cols();
    Eigen::MatrixXd out(hs * ws, c);
    for (int a = 0; a < hs; ++a)
        for (int b = 0; b < ws; ++b)
            for (int o = 0; o < c; ++o) {
                double acc = db(0, o);
                for (int u = 0; u < cfg.kernel_h; ++u)
                    for (int v = 0; v < cfg.kernel_w; ++v)
                        acc += mid((a * cfg.kernel_h + u) * w + b * cfg.kernel_w + v, o) * dw(u * cfg.kernel_w + v, o);
                out(a * ws + b, o) = gelu(acc);
            }
    return out;
}

CdaConfig small_config() {
    CdaConfig c;
    c.map_height = 8;
    c.map_width = 4;
    c.channels = 8;
    c.kernel_h = 4;
    c.kernel_w = 2;
    c.heads = 2;
    return c;
}

void randomize(ParameterStore& store, std::mt19937_64& rng, double scale = 0.3) {
    for (auto& [name, p] : store.items()) p.value = random_matrix(p.value.rows(), p.value.cols(), rng, scale);
}

}  // namespace

TEST_CASE("split_tokens indexes the local map row-major") {
    std::mt19937_64 rng(1);
    const auto f = random_matrix(18, 5, rng);
    const auto s = split_tokens(f, 4, 4);
    CHECK(s.local.at(1, 2) == f.row(1 * 4 + 2 + 1));
    CHECK(s.pseudo == f.row(0));
    CHECK(s.cls == f.row(17));
    Eigen::MatrixXd back(18, 5);
    back << s.pseudo, s.local.values, s.cls;
    CHECK(back == f);
    CHECK_THROWS_AS(split_tokens(random_matrix(17, 5, rng), 4, 4), ShapeMismatch);
}

TEST_CASE("reference points follow the align-corners centres") {
    const auto p = reference_points(8, 8, 4, 4);
    REQUIRE(p.rows() == 4);
    CHECK(p(0, 0) == doctest::Approx(2 * 1.5 / 7 - 1).epsilon(1e-15));
    CHECK(p(0, 0) == doctest::Approx(-0.5714285714285714));
    CHECK(p(3, 0) == doctest::Approx(0.5714285714285714));
    CHECK(p(3, 1) == doctest::Approx(2 * 5.5 / 7 - 1));
    const auto r = reference_points(8, 4, 4, 2);
    CHECK(r.rows() == 4);
    CHECK(r(1, 0) == doctest::Approx(2 * 2.5 / 3 - 1));
    CHECK(r(2, 1) == doctest::Approx(2 * 5.5 / 7 - 1));
}

TEST_CASE("bilinear sampling matches the tent oracle") {
    std::mt19937_64 rng(2);
    double worst = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const int h = 2 + trial % 5, w = 2 + trial % 3;
        const auto values = random_matrix(h * w, 3, rng);
        const auto pos = uniform_matrix(4, 2, rng, -1, 1);
        const auto out = bilinear_sample(values, h, w, pos);
        for (int n = 0; n < 4; ++n) worst = std::max(worst, (out.row(n) - tent_oracle(values, h, w, pos(n, 0), pos(n, 1))).cwiseAbs().maxCoeff());
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("bilinear sampling at the centre of a 2x2 map averages it") {
    Eigen::MatrixXd values(4, 1);
    values << 1, 2, 3, 4;
    Eigen::MatrixXd pos(1, 2);
    pos << 0, 0;
    CHECK(bilinear_sample(values, 2, 2, pos)(0, 0) == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("bilinear sampling at grid points returns the stored vector") {
    std::mt19937_64 rng(3);
    const int h = 8, w = 4;
    const auto values = random_matrix(h * w, 6, rng);
    for (int j = 0; j < h; ++j)
        for (int i = 0; i < w; ++i) {
            Eigen::MatrixXd pos(1, 2);
            pos << pixel_to_normalized(i, w), pixel_to_normalized(j, h);
            CHECK((bilinear_sample(values, h, w, pos).row(0) - values.row(j * w + i)).cwiseAbs().maxCoeff() < 1e-12);
        }
}

TEST_CASE("bilinear gradients in values and positions away from kinks") {
    std::mt19937_64 rng(4);
    const auto values = random_matrix(2 * 12, 3, rng);
    Eigen::MatrixXd pos = uniform_matrix(6, 2, rng, -0.95, 0.95);
    // keep positions off integer pixel coordinates
    for (Eigen::Index r = 0; r < pos.rows(); ++r) {
        const double x = normalized_to_pixel(pos(r, 0), 3), y = normalized_to_pixel(pos(r, 1), 4);
        if (std::abs(x - std::round(x)) < 1e-3) pos(r, 0) += 0.01;
        if (std::abs(y - std::round(y)) < 1e-3) pos(r, 1) += 0.01;
    }
    const double err = gradient_check(
        [](ad::Tape<double>& t, const std::vector<ad::Var<double>>& x) { return weighted_sum(t, ad::bilinear_sample(x[0], 4, 3, x[1], 2)); },
        {values, pos});
    CHECK(err < 1e-6);
}

TEST_CASE("right-continuous sub-gradient at an integer coordinate") {
    Eigen::MatrixXd values(4, 1);
    values << 0, 10, 0, 10;  // value grows along x by 10 per pixel (1×2 map rows)
    ad::Tape<double> tape;
    const auto v = tape.constant(values);
    Eigen::MatrixXd p(1, 2);
    p << -1.0, -1.0;  // exactly at pixel (0, 0)
    const auto pos = tape.variable(p);
    tape.backward(ad::sum(ad::bilinear_sample(v, 2, 2, pos, 1)));
    CHECK(pos.grad()(0, 0) == doctest::Approx(10 * 0.5));  // d/dx_pix = 10, dx_pix/dx_norm = 0.5
}

TEST_CASE("depth-wise convolution gradients") {
    std::mt19937_64 rng(5);
    const auto x = random_matrix(2 * 8, 3, rng), w = random_matrix(4, 3, rng), b = random_matrix(1, 3, rng);
    const double err = gradient_check(
        [](ad::Tape<double>& t, const std::vector<ad::Var<double>>& v) {
            return weighted_sum(t, ad::depthwise_conv(v[0], 4, 2, 2, 2, v[1], &v[2], 2));
        },
        {x, w, b});
    CHECK(err < 1e-6);
}

TEST_CASE("local mixer matches a nested-loop oracle") {
    std::mt19937_64 rng(6);
    ParameterStore store;
    const auto cfg = small_config();
    DeformableAggregation cda(store, cfg, rng);
    randomize(store, rng);
    std::array<Eigen::MatrixXd, 3> raw;
    std::array<LocalMap<double>, 3> locals;
    for (int m = 0; m < 3; ++m) {
        raw[m] = random_matrix(32, 8, rng);
        locals[m] = LocalMap<double>{raw[m], 8, 4};
    }
    const auto mixed = cda.local_mixer(locals);
    CHECK(mixed.rows() == 4);
    CHECK((mixed - mixer_oracle(raw, store, cfg)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("local mixer of zero input with zero biases is zero") {
    std::mt19937_64 rng(7);
    ParameterStore store;
    DeformableAggregation cda(store, small_config(), rng);
    std::array<LocalMap<double>, 3> locals;
    for (auto& l : locals) l = LocalMap<double>{Eigen::MatrixXd::Zero(32, 8), 8, 4};
    CHECK(cda.local_mixer(locals).isZero(0));
}

TEST_CASE("local mixer on an 8x8 map with stride 4 yields four cells") {
    std::mt19937_64 rng(8);
    ParameterStore store;
    CdaConfig cfg = small_config();
    cfg.map_width = 8;
    cfg.kernel_w = 4;
    DeformableAggregation cda(store, cfg, rng);
    std::array<LocalMap<double>, 3> locals;
    for (auto& l : locals) l = LocalMap<double>{random_matrix(64, 8, rng), 8, 8};
    CHECK(cda.local_mixer(locals).rows() == 4);
    CHECK(cfg.num_sampled() == 4);
}

TEST_CASE("zero offset generator leaves the reference grid") {
    std::mt19937_64 rng(9);
    ParameterStore store;
    DeformableAggregation cda(store, small_config(), rng);
    const auto grid = cda.make_grid(random_matrix(4, 8, rng));
    CHECK(grid.offsets.isZero(0));
    CHECK(grid.positions == grid.reference);
    CHECK(grid.rows == 2);
    CHECK(grid.cols == 2);
}

TEST_CASE("positions are clipped to the closest valid value") {
    std::mt19937_64 rng(10);
    ParameterStore store;
    const auto cfg = small_config();
    DeformableAggregation cda(store, cfg, rng);
    // a bias that pushes every x by +1.2 - P_x and y by nothing
    const auto ref = reference_points(cfg.map_height, cfg.map_width, cfg.kernel_h, cfg.kernel_w);
    store.at("cda.offset.bias").value(0, 0) = (1.2 - ref(1, 0)) / cfg.offset_multiplier();
    const auto grid = cda.make_grid(Eigen::MatrixXd::Zero(4, 8));
    CHECK(grid.positions(1, 0) == 1.0);
    CHECK(grid.offsets(1, 0) == doctest::Approx(1.2 - ref(1, 0)));
    CHECK(grid.positions(1, 1) == ref(1, 1));
}

TEST_CASE("offset multiplier converts k pixels to normalised units") {
    CdaConfig c = small_config();
    c.offset_scale = 5;
    CHECK(c.offset_multiplier() == doctest::Approx(5.0 * 2.0 / 7.0));
}

TEST_CASE("cross-attention fusion") {
    std::mt19937_64 rng(11);
    ParameterStore store;
    const auto cfg = small_config();
    DeformableAggregation cda(store, cfg, rng);
    randomize(store, rng);
    const auto global = random_matrix(6, 8, rng);
    const auto sampled = random_matrix(12, 8, rng);

    SUBCASE("matches a naive attention oracle") {
        auto lin = [&](const Eigen::MatrixXd& x, const std::string& n) {
            Eigen::MatrixXd y = x * store.at("cda.attn." + n + ".weight").value;
            y.rowwise() += store.at("cda.attn." + n + ".bias").value.row(0);
            return y;
        };
        const Eigen::MatrixXd q = lin(global, "q"), k = lin(sampled, "k"), v = lin(sampled, "v");
        Eigen::MatrixXd att(6, 8);
        const int dh = 4;
        for (int h = 0; h < 2; ++h) {
            Eigen::MatrixXd s = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() / std::sqrt(double(dh));
            for (int i = 0; i < 6; ++i) {
                s.row(i) = (s.row(i).array() - s.row(i).maxCoeff()).exp();
                s.row(i) /= s.row(i).sum();
            }
            att.middleCols(h * dh, dh) = s * v.middleCols(h * dh, dh);
        }
        const Eigen::MatrixXd expect = global + lin(att, "out");
        CHECK((cda.fuse(global, sampled) - expect).cwiseAbs().maxCoeff() < 1e-10);
    }
    SUBCASE("zero output projection is the identity") {
        store.at("cda.attn.out.weight").value.setZero();
        store.at("cda.attn.out.bias").value.setZero();
        CHECK(cda.fuse(global, sampled) == global);
    }
    SUBCASE("identical sampled rows give the value projection") {
        store.at("cda.attn.out.weight").value = Eigen::MatrixXd::Identity(8, 8);
        store.at("cda.attn.out.bias").value.setZero();
        const Eigen::RowVectorXd v = random_matrix(1, 8, rng);
        const Eigen::MatrixXd same = v.replicate(12, 1);
        Eigen::RowVectorXd proj = v * store.at("cda.attn.v.weight").value + store.at("cda.attn.v.bias").value;
        const Eigen::MatrixXd out = cda.fuse(global, same) - global;
        for (int r = 0; r < 6; ++r) CHECK((out.row(r) - proj).cwiseAbs().maxCoeff() < 1e-12);
    }
    CHECK_THROWS_AS(cda.fuse(random_matrix(5, 8, rng), sampled), ShapeMismatch);
}

TEST_CASE("one grid is shared by the three samplers") {
    std::mt19937_64 rng(12);
    ParameterStore store;
    DeformableAggregation cda(store, small_config(), rng);
    randomize(store, rng);
    ad::Tape<double> tape;
    std::array<ad::Var<double>, 3> locals;
    for (auto& l : locals) l = tape.constant(random_matrix(2 * 32, 8, rng));
    const auto trace = cda.forward(tape, locals, tape.constant(random_matrix(12, 8, rng)), 2);
    CHECK(trace.sampler_positions[0] == trace.positions);
    CHECK(trace.sampler_positions[1] == trace.positions);
    CHECK(trace.sampler_positions[2] == trace.positions);
    CHECK(trace.sampled.rows() == 2 * 12);
    CHECK(trace.fused.rows() == 12);
    CHECK(trace.positions.value().cwiseAbs().maxCoeff() <= 1.0);
}

TEST_CASE("zero offsets sample the stride-cell centres") {
    std::mt19937_64 rng(13);
    ParameterStore store;
    const auto cfg = small_config();
    DeformableAggregation cda(store, cfg, rng);
    ad::Tape<double> tape;
    std::array<Eigen::MatrixXd, 3> raw;
    std::array<ad::Var<double>, 3> locals;
    for (int m = 0; m < 3; ++m) {
        raw[m] = random_matrix(32, 8, rng);
        locals[m] = tape.constant(raw[m]);
    }
    const auto trace = cda.forward(tape, locals, tape.constant(random_matrix(6, 8, rng)), 1);
    const auto ref = reference_points(8, 4, 4, 2);
    for (int m = 0; m < 3; ++m)
        for (int n = 0; n < 4; ++n) {
            // centre of a 4×2 cell sits between four pixels
            const double cx = normalized_to_pixel(ref(n, 0), 4), cy = normalized_to_pixel(ref(n, 1), 8);
            const int i = static_cast<int>(cx), j = static_cast<int>(cy);
            Eigen::RowVectorXd expect = 0.25 * (raw[m].row(j * 4 + i) + raw[m].row(j * 4 + i + 1) + raw[m].row((j + 1) * 4 + i) +
                                                raw[m].row((j + 1) * 4 + i + 1));
            CHECK((trace.sampled.value().row(m * 4 + n) - expect).cwiseAbs().maxCoeff() < 1e-12);
        }
}

TEST_CASE("toy end-to-end CDA gradients") {
    std::mt19937_64 rng(14);
    ParameterStore store;
    const auto cfg = small_config();
    DeformableAggregation cda(store, cfg, rng);
    randomize(store, rng, 0.2);
    std::vector<Eigen::MatrixXd> inputs{random_matrix(32, 8, rng), random_matrix(32, 8, rng), random_matrix(32, 8, rng),
                                        random_matrix(6, 8, rng)};
    std::vector<std::string> names;
    for (const auto& [n, p] : store.items()) {
        names.push_back(n);
        inputs.push_back(p.value);
    }
    std::vector<Eigen::MatrixXd> analytic;
    {
        ad::Tape<double> tape;
        std::vector<ad::Var<double>> vars;
        for (const auto& x : inputs) vars.push_back(tape.variable(x));
        for (std::size_t i = 0; i < names.size(); ++i) store.at(names[i]).value = inputs[4 + i];
        const auto trace = cda.forward(tape, {vars[0], vars[1], vars[2]}, vars[3], 1);
        tape.backward(weighted_sum(tape, trace.fused));
        store.zero_grad();
        tape.flush_param_grads();
        for (std::size_t i = 0; i < 4; ++i) analytic.push_back(vars[i].grad());
        for (const auto& n : names)
            analytic.push_back(store.at(n).grad.size() ? store.at(n).grad : Eigen::MatrixXd::Zero(store.at(n).value.rows(), store.at(n).value.cols()));
        // no free position may sit on a kink; clamped ones carry no positional gradient
        for (Eigen::Index r = 0; r < trace.positions.rows(); ++r)
            for (int c = 0; c < 2; ++c) {
                const double p = trace.positions.value()(r, c);
                if (std::abs(p) == 1.0) continue;
                const double pix = normalized_to_pixel(p, c == 0 ? 4 : 8);
                REQUIRE(std::abs(pix - std::round(pix)) > 1e-4);
            }
    }
    double worst = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto value = [&] {
            ad::Tape<double> tape;
            for (std::size_t j = 0; j < names.size(); ++j) store.at(names[j]).value = inputs[4 + j];
            const auto trace = cda.forward(tape, {tape.constant(inputs[0]), tape.constant(inputs[1]), tape.constant(inputs[2])},
                                           tape.constant(inputs[3]), 1);
            return weighted_sum(tape, trace.fused).value()(0, 0);
        };
        worst = std::max(worst, idea::testing::max_relative_error(analytic[i], idea::testing::numeric_gradient(value, inputs[i])));
    }
    CHECK(worst < 1e-4);
}
