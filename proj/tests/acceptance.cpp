// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//   idea_acceptance [--work-dir DIR] [--only 1,3,8]

#include "test_support.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include "idea/captions.hpp"
#include "idea/cli.hpp"
#include "idea/losses.hpp"
#include "idea/log.hpp"
#include "idea/retrieval.hpp"
#include "idea/synth_data.hpp"
#include "idea/training.hpp"

using namespace idea;
using idea::testing::micro_config;
using idea::testing::random_inputs;
using idea::testing::random_matrix;
using idea::testing::uniform_matrix;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Stopwatch {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

int pick(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// ---- 1: shapes -------------------------------------------------------------

Outcome shape_suite() {
    std::mt19937_64 rng(101);
    int ok = 0, total = 0;
    for (int trial = 0; trial < 60; ++trial) {
        ModelConfig c = micro_config();
        c.patch_size = pick(rng, 2, 4);
        c.image_height = c.patch_size * 2 * pick(rng, 1, 4);
        c.image_width = c.patch_size * 2 * pick(rng, 1, 3);
        c.heads = pick(rng, 1, 2);
        c.cda_heads = pick(rng, 1, 2);
        c.text_width = c.heads * pick(rng, 2, 6);
        c.vision_width = c.heads * pick(rng, 2, 6);
        c.embed_dim = 2 * c.cda_heads * pick(rng, 1, 4);
        c.num_prompts = pick(rng, 0, 3);
        c.text_depth = pick(rng, 0, 1);
        c.vision_depth = pick(rng, 0, 1);
        const IdeaModel model(c, Variant::Idea, static_cast<std::uint64_t>(trial));
        const auto in = random_inputs(c, 1, rng);
        const FeatureBundle f = model.features(in.samples()[0]);
        const Eigen::Index C = c.embed_dim, N_l = c.num_patches(), N_S = c.cda_config().num_sampled();
        bool good = f.F_G.rows() == 6 && f.F_G.cols() == C && f.F_S.rows() == 3 * N_S && f.F_S.cols() == C && f.F_CDA.rows() == 6 &&
                    f.F_CDA.cols() == C;
        for (const auto& fm : f.F_m) good = good && fm.rows() == N_l + 2 && fm.cols() == C;
        ok += good;
        ++total;
    }
    return {ok == total, std::to_string(ok) + "/" + std::to_string(total) + " random configurations"};
}

// ---- 2: end-to-end gradient check ------------------------------------------

/// Bilinear cell and clip state of every sampling position; a change between
/// perturbations marks the perturbed entry as sitting on a kink.
std::vector<int> kink_signature(const CdaTrace<double>& trace, int height, int width) {
    std::vector<int> sig;
    const Eigen::MatrixXd raw = trace.offsets.value() + trace.reference;
    for (Eigen::Index r = 0; r < raw.rows(); ++r) {
        const auto cell = idea::detail::bilinear_cell(trace.positions.value()(r, 0), trace.positions.value()(r, 1), height, width);
        sig.push_back(cell.i0);
        sig.push_back(cell.j0);
        sig.push_back(std::abs(raw(r, 0)) > 1.0);
        sig.push_back(std::abs(raw(r, 1)) > 1.0);
    }
    return sig;
}

Outcome gradient_check() {
    Stopwatch clock;
    ModelConfig cfg = micro_config();
    if (cfg.image_height != 16 || cfg.image_width != 8 || cfg.patch_size != 4 || cfg.embed_dim != 8 || cfg.num_prompts != 1)
        return {false, "micro configuration drifted"};
    std::mt19937_64 rng(202);
    const auto in = random_inputs(cfg, 4, rng);
    const auto samples = in.samples();
    const std::vector<int> labels{0, 0, 1, 1};
    IdeaModel model(cfg, Variant::Idea, 7);
    ad::Tape<double> probe(false);
    const auto names = model.forward(probe, std::span<const SampleInput>(samples)).loss_feature_names;
    const HeadBank heads(model.parameters(), names, 3 * cfg.embed_dim, 2, rng);
    // move the zero-initialised offset generator and output projection off their starting point
    for (auto& [name, p] : model.parameters().items())
        if (name.find("offset.") != std::string::npos || name.find("attn.out.") != std::string::npos)
            p.value = random_matrix(p.value.rows(), p.value.cols(), rng, 0.2);
    const CdaConfig cda = cfg.cda_config();
    const auto losses = LossFunctions<double>::standard(LossConfig{});

    std::vector<int> signature;
    auto loss = [&](bool grad) {
        ad::Tape<double> tape(false);
        tape.set_grad_enabled(grad);
        const auto bundle = model.forward(tape, std::span<const SampleInput>(samples));
        const auto terms = objective(bundle, labels, heads, losses);
        signature = kink_signature(*bundle.cda, cda.map_height, cda.map_width);
        if (grad) {
            tape.backward(terms.total);
            model.parameters().zero_grad();
            tape.flush_param_grads();
        }
        return terms.total.value()(0, 0);
    };
    loss(true);
    const std::vector<int> base = signature;
    const double h = 1e-5;
    double worst = 0, worst_analytic = 0, worst_numeric = 0;
    std::string worst_name;
    long checked = 0, excluded = 0;
    for (auto& [name, p] : model.parameters().items()) {
        const Eigen::MatrixXd analytic = p.grad;
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            const double keep = p.value.data()[i];
            p.value.data()[i] = keep + h;
            const double up = loss(false);
            const bool kink_up = signature != base;
            p.value.data()[i] = keep - h;
            const double down = loss(false);
            const bool kink_down = signature != base;
            p.value.data()[i] = keep;
            if (kink_up || kink_down) {
                ++excluded;
                continue;
            }
            const double numeric = (up - down) / (2 * h);
            const double err = idea::testing::relative_error(analytic.data()[i], numeric);
            if (err > worst) worst = err, worst_name = name, worst_analytic = analytic.data()[i], worst_numeric = numeric;
            ++checked;
        }
    }
    const double secs = clock.seconds();
    const bool pass = worst <= 1e-4 && secs < 120.0 && checked > 0;
    return {pass, "max rel err " + fmt("%.3g", worst) + " (" + worst_name + ", analytic " + fmt("%.3g", worst_analytic) +
                      ", numeric " + fmt("%.3g", worst_numeric) + ") over " + std::to_string(checked) + " entries, " +
                      std::to_string(excluded) + " on kinks, " + fmt("%.1f", secs) + " s"};
}

// ---- 3: bilinear sampling oracle --------------------------------------------

double tent(const Eigen::MatrixXd& values, int h, int w, double xn, double yn, Eigen::Index c) {
    const double x = (xn + 1) / 2 * (w - 1), y = (yn + 1) / 2 * (h - 1);
    double s = 0;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            s += values(i * w + j, c) * std::max(0.0, 1 - std::abs(x - j)) * std::max(0.0, 1 - std::abs(y - i));
    return s;
}

Outcome bilinear_oracle() {
    std::mt19937_64 rng(303);
    double worst = 0, worst_grid = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int h = pick(rng, 2, 9), w = pick(rng, 2, 9);
        const Eigen::Index C = pick(rng, 1, 5);
        const Eigen::MatrixXd values = random_matrix(h * w, C, rng);
        const Eigen::MatrixXd pos = uniform_matrix(1, 2, rng, -1.0, 1.0);
        const Eigen::MatrixXd got = bilinear_sample(values, h, w, pos);
        for (Eigen::Index c = 0; c < C; ++c) worst = std::max(worst, std::abs(got(0, c) - tent(values, h, w, pos(0, 0), pos(0, 1), c)));
        if (trial % 10 == 0) {
            Eigen::MatrixXd grid(h * w, 2);
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) grid.row(i * w + j) << pixel_to_normalized(j, w), pixel_to_normalized(i, h);
            worst_grid = std::max(worst_grid, (bilinear_sample(values, h, w, grid) - values).cwiseAbs().maxCoeff());
        }
    }
    return {worst < 1e-12 && worst_grid < 1e-12,
            "1000 pairs max diff " + fmt("%.2g", worst) + ", grid points max diff " + fmt("%.2g", worst_grid)};
}

// ---- 4: clipped, shared sampling grid ---------------------------------------

Outcome clip_share_fuzz() {
    std::mt19937_64 rng(404);
    CdaConfig cfg;
    cfg.channels = 8;
    cfg.heads = 2;
    ParameterStore store;
    DeformableAggregation cda(store, cfg, rng);
    Parameter& weight = store.at("cda.offset.weight");
    Parameter& bias = store.at("cda.offset.bias");
    const int hw = cfg.map_height * cfg.map_width;
    std::array<Eigen::MatrixXd, 3> raw;
    for (auto& m : raw) m = random_matrix(hw, cfg.channels, rng);
    const Eigen::MatrixXd global = random_matrix(6, cfg.channels, rng);
    std::uniform_real_distribution<double> log_scale(-3.0, 2.0);
    long out_of_range = 0, unshared = 0;
    const long trials = 100000;
    for (long t = 0; t < trials; ++t) {
        const double s = std::pow(10.0, log_scale(rng));
        weight.value = random_matrix(cfg.channels, 2, rng, s);
        bias.value = random_matrix(1, 2, rng, s);
        ad::Tape<double> tape(false);
        tape.set_grad_enabled(false);
        const auto trace = cda.forward(tape, {tape.constant(raw[0]), tape.constant(raw[1]), tape.constant(raw[2])}, tape.constant(global), 1);
        const Eigen::MatrixXd& p = trace.positions.value();
        if (p.cwiseAbs().maxCoeff() > 1.0 || !p.allFinite()) ++out_of_range;
        bool shared = true;
        for (const auto& grid : trace.sampler_positions)
            shared = shared && grid == trace.positions && grid.value() == trace.sampler_positions[0].value();
        if (!shared) ++unshared;
    }
    return {out_of_range == 0 && unshared == 0, std::to_string(trials) + " weight draws, " + std::to_string(out_of_range) +
                                                    " outside [-1,1], " + std::to_string(unshared) + " unshared grids"};
}

// ---- 5: retrieval metrics ---------------------------------------------------

double brute_force_map(const Eigen::MatrixXd& d, const std::vector<int>& qi, const std::vector<int>& gi, const std::vector<int>& qc,
                       const std::vector<int>& gc, int& valid) {
    double sum = 0;
    valid = 0;
    for (std::size_t q = 0; q < qi.size(); ++q) {
        std::vector<std::tuple<double, int, int, int>> rows;
        for (std::size_t g = 0; g < gi.size(); ++g)
            if (!(gi[g] == qi[q] && gc[g] == qc[q])) rows.emplace_back(d(Eigen::Index(q), Eigen::Index(g)), gi[g], gc[g], int(g));
        std::sort(rows.begin(), rows.end());
        int hits = 0;
        double prec = 0;
        for (std::size_t r = 0; r < rows.size(); ++r)
            if (std::get<1>(rows[r]) == qi[q]) prec += double(++hits) / double(r + 1);
        if (hits) sum += prec / hits, ++valid;
    }
    return valid ? sum / valid : 0.0;
}

Outcome metric_oracle() {
    std::mt19937_64 rng(505);
    set_log_level(LogLevel::Error);  // instances without a valid query are expected here
    struct Restore {
        ~Restore() { set_log_level(LogLevel::Warning); }
    } restore;
    double worst = 0;
    bool monotone = true;
    for (int trial = 0; trial < 200; ++trial) {
        const int nq = pick(rng, 1, 50), ng = pick(rng, 1, 50), ids = pick(rng, 1, 8), cams = pick(rng, 1, 3);
        Eigen::MatrixXd d = uniform_matrix(nq, ng, rng, 0.0, 2.0);
        if (trial % 2) d = (d * 2.0).array().round() / 2.0;  // ties
        std::vector<int> qi, gi, qc, gc;
        for (int i = 0; i < nq; ++i) qi.push_back(pick(rng, 0, ids - 1)), qc.push_back(pick(rng, 0, cams - 1));
        for (int j = 0; j < ng; ++j) gi.push_back(pick(rng, 0, ids - 1)), gc.push_back(pick(rng, 0, cams - 1));
        int valid = 0;
        const double oracle = brute_force_map(d, qi, gi, qc, gc, valid);
        const RetrievalResult r = cmc_map(d, qi, gi, qc, gc);
        worst = std::max(worst, std::abs(r.mAP - oracle) + (r.num_valid_queries == valid ? 0.0 : 1.0));
        for (std::size_t i = 1; i < r.cmc_curve.size(); ++i) monotone = monotone && r.cmc_curve[i - 1] <= r.cmc_curve[i];
    }
    Eigen::MatrixXd d(1, 4);
    d << 0.1, 0.2, 0.3, 0.4;
    const double ap = cmc_map(d, std::vector<int>{7}, std::vector<int>{7, 1, 7, 2}, std::vector<int>{0}, std::vector<int>{1, 1, 2, 1}).mAP;
    const bool five_sixths = std::abs(ap - 5.0 / 6.0) < 1e-12;
    return {worst < 1e-9 && monotone && five_sixths, "200 instances max diff " + fmt("%.2g", worst) + ", CMC monotone " +
                                                          (monotone ? "yes" : "no") + ", hits at 1 and 3 give AP " + fmt("%.4f", ap)};
}

// ---- 6: losses --------------------------------------------------------------

Outcome loss_oracles() {
    std::mt19937_64 rng(606);
    double worst_ce = 0, worst_tri = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const int B = pick(rng, 1, 8), K = pick(rng, 2, 10);
        const Eigen::MatrixXd z = random_matrix(B, K, rng, 3.0);
        std::vector<int> y(static_cast<std::size_t>(B));
        for (auto& v : y) v = pick(rng, 0, K - 1);
        const double eps = trial % 3 == 0 ? 0.0 : 0.1;
        double oracle = 0;
        for (int b = 0; b < B; ++b) {
            double norm = 0;
            for (int c = 0; c < K; ++c) norm += std::exp(z(b, c));
            for (int c = 0; c < K; ++c) oracle -= ((c == y[std::size_t(b)] ? 1 - eps : 0) + eps / K) * (z(b, c) - std::log(norm));
        }
        worst_ce = std::max(worst_ce, std::abs(label_smoothing_ce(z, y, eps).value - oracle / B));

        const int ids = pick(rng, 2, 4);
        std::vector<int> t;
        for (int i = 0; i < ids; ++i) t.insert(t.end(), 2, i);
        const Eigen::MatrixXd x = random_matrix(Eigen::Index(t.size()), 4, rng);
        double tri = 0;
        for (std::size_t a = 0; a < t.size(); ++a) {
            double worst = 0;
            for (std::size_t p = 0; p < t.size(); ++p)
                for (std::size_t n = 0; n < t.size(); ++n)
                    if (p != a && t[p] == t[a] && t[n] != t[a])
                        worst = std::max(worst, (x.row(Eigen::Index(a)) - x.row(Eigen::Index(p))).norm() -
                                                    (x.row(Eigen::Index(a)) - x.row(Eigen::Index(n))).norm() + 0.3);
            tri += worst;
        }
        worst_tri = std::max(worst_tri, std::abs(batch_hard_triplet(x, t, 0.3).value - tri / double(t.size())));
    }
    const double uniform = label_smoothing_ce(Eigen::MatrixXd::Zero(4, 7), std::vector<int>{0, 1, 2, 6}, 0.1).value;
    const bool log_k = std::abs(uniform - std::log(7.0)) < 1e-12;
    return {worst_ce < 1e-12 && worst_tri < 1e-12 && log_k, "CE max diff " + fmt("%.2g", worst_ce) + ", triplet max diff " +
                                                                fmt("%.2g", worst_tri) + ", uniform logits K=7 give " + fmt("%.12f", uniform)};
}

// ---- 7: captions ------------------------------------------------------------

Outcome caption_round_trip() {
    std::mt19937_64 rng(707);
    int mismatches = 0;
    for (int i = 0; i < 500; ++i) {
        const SubjectKind kind = i % 5 == 4 ? SubjectKind::Vehicle : SubjectKind::Person;
        const auto& vocab = vocabulary_for(kind);
        AttributeRecord a = AttributeRecord::unknown(kind);
        for (const auto& slot : slots_for(kind)) {
            const auto& choices = is_color_slot(slot) ? vocab.colors : vocab.values.at(slot);
            a[slot] = choices[std::uniform_int_distribution<std::size_t>(0, choices.size() - 1)(rng)];
        }
        try {
            mismatches += !(extract_attributes(fill_template(a).text, kind) == a);
        } catch (const UnparseableCaption&) {
            ++mismatches;
        }
    }
    int unparseable = 0;
    RetryPolicy retry;
    retry.sleep = [](std::chrono::milliseconds) {};
    for (int i = 0; i < 100; ++i) {
        MockMllmClient client(i % 2 ? MockMllmClient::Style::Verbose : MockMllmClient::Style::Template);
        const ImageRef ref{"acceptance/" + std::to_string(i) + ".png"};
        const Caption c = annotate_image(ref, kModalities[std::size_t(i % 3)], SubjectKind::Person, client, retry);
        try {
            unparseable += !(extract_attributes(c.text, SubjectKind::Person) == MockMllmClient::hashed_attributes(ref, SubjectKind::Person));
        } catch (const UnparseableCaption&) {
            ++unparseable;
        }
    }
    return {mismatches == 0 && unparseable == 0, std::to_string(mismatches) + "/500 round-trip mismatches, " + std::to_string(unparseable) +
                                                     "/100 unparseable mock captions"};
}

// ---- 8, 9: ablation ---------------------------------------------------------

struct AblationRun {
    nlohmann::json report;
    double seconds = 0;
    std::string error;
};

AblationRun run_default_ablation(const fs::path& work) {
    AblationRun out;
    Stopwatch clock;
    try {
        RunConfig cfg = RunConfig::defaults();
        cfg.data_dir = (work / "default_data").string();
        cfg.out_dir = (work / "ablation").string();
        fs::remove_all(cfg.data_dir);
        fs::remove_all(cfg.out_dir);
        generate_dataset(cfg.synth, cfg.data_dir);
        out.report = run_ablation(cfg, AblationOptions{});
    } catch (const std::exception& e) {
        out.error = e.what();
    }
    out.seconds = clock.seconds();
    return out;
}

double aggregate(const nlohmann::json& report, const std::string& variant) {
    for (const auto& row : report.at("aggregates"))
        if (row.at("variant") == variant) return row.at("mean_mAP").get<double>();
    return -1;
}

Outcome ablation_ordering(const AblationRun& run) {
    if (!run.error.empty()) return {false, "ablation failed: " + run.error};
    int failed = 0;
    for (const auto& [key, cell] : run.report.at("cells").items()) failed += cell.at("status") != "ok";
    const double base = aggregate(run.report, "baseline"), par = aggregate(run.report, "parallel_text"),
                 imfe = aggregate(run.report, "imfe"), idea = aggregate(run.report, "idea");
    const bool pass = failed == 0 && idea > imfe && imfe > base && idea >= base + 0.02 && par >= base && run.seconds < 45 * 60;
    return {pass, "mean mAP baseline " + fmt("%.4f", base) + ", parallel_text " + fmt("%.4f", par) + ", imfe " + fmt("%.4f", imfe) +
                      ", idea " + fmt("%.4f", idea) + "; " + std::to_string(failed) + " failed cells; " + fmt("%.0f", run.seconds) + " s"};
}

Outcome blank_captions(const AblationRun& run) {
    if (!run.error.empty()) return {false, "ablation failed: " + run.error};
    double worst_drop = -1;
    int checked = 0;
    for (const auto& [key, cell] : run.report.at("cells").items()) {
        if (cell.at("variant") != "idea") continue;
        const auto& blank = run.report.at("text_missing").at(key).at("M(RNT)");
        if (blank.at("status") != "ok") return {false, key + ": blank-caption evaluation failed"};
        worst_drop = std::max(worst_drop, cell.at("mAP").get<double>() - blank.at("mAP").get<double>());
        ++checked;
    }
    return {checked == 3 && worst_drop <= 0.10,
            std::to_string(checked) + " checkpoints, largest all-blank drop " + fmt("%.2f", 100 * worst_drop) + " mAP points"};
}

// ---- 10: determinism --------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome determinism(const fs::path& work) {
    const fs::path data = work / "determinism_data";
    fs::remove_all(data);
    RunConfig cfg = RunConfig::defaults();
    cfg.synth.num_identities = 16;
    generate_dataset(cfg.synth, data.string());
    std::vector<std::string> logs;
    for (const char* name : {"run_a", "run_b"}) {
        const fs::path out = work / "determinism" / name;
        fs::remove_all(out);
        const int code = run(std::vector<std::string>{"idea", "train", "--data", data.string(), "--variant", "idea", "--seed", "3", "--set",
                                                      "loss.epochs=3", "--set", "train.eval_every=1", "--out", out.string(),
                                                      "--log-level", "warning"});
        if (code != 0) return {false, std::string(name) + " exited with " + std::to_string(code)};
        logs.push_back(slurp(out / "metrics.jsonl"));
    }
    const bool same = !logs[0].empty() && logs[0] == logs[1];
    return {same, "two seeded runs, metrics logs of " + std::to_string(logs[0].size()) + " bytes " + (same ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app("Acceptance criteria");
    std::string work_dir = (fs::temp_directory_path() / "idea_acceptance").string();
    std::string only;
    app.add_option("--work-dir", work_dir, "Scratch directory for datasets and runs");
    app.add_option("--only", only, "Comma-separated criteria to run (default: all)");
    CLI11_PARSE(app, argc, argv);
    set_log_level(LogLevel::Warning);
    fs::create_directories(work_dir);

    std::set<int> selected;
    std::stringstream ss(only);
    for (std::string tok; std::getline(ss, tok, ',');)
        if (!tok.empty()) selected.insert(std::stoi(tok));
    auto wanted = [&](int n) { return selected.empty() || selected.count(n); };

    int failures = 0;
    auto report = [&](int n, const std::string& title, const std::function<Outcome()>& fn) {
        if (!wanted(n)) return;
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("[%s] criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", n, title.c_str(), o.detail.c_str());
        std::fflush(stdout);
    };

    report(1, "shape suite", shape_suite);
    report(2, "gradient check", gradient_check);
    report(3, "bilinear oracle", bilinear_oracle);
    report(4, "clip and shared grid", clip_share_fuzz);
    report(5, "metric oracle", metric_oracle);
    report(6, "loss oracles", loss_oracles);
    report(7, "caption round-trip", caption_round_trip);
    AblationRun ablation;
    if (wanted(8) || wanted(9)) ablation = run_default_ablation(work_dir);
    report(8, "ablation ordering", [&] { return ablation_ordering(ablation); });
    report(9, "blank captions", [&] { return blank_captions(ablation); });
    report(10, "determinism", [&] { return determinism(work_dir); });
    return failures ? 1 : 0;
}
