// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "idea/captions.hpp"
#include "idea/checkpoint.hpp"
#include "idea/errors.hpp"
#include "idea/log.hpp"

namespace fs = std::filesystem;

namespace idea {
namespace {

const char* const kModalityKeys[] = {"rgb", "nir", "tir"};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream in(s);
    for (std::string item; std::getline(in, item, sep);)
        if (!trim(item).empty()) out.push_back(trim(item));
    return out;
}

nlohmann::json parse_like(const nlohmann::json& like, const std::string& key, const std::string& text) {
    try {
        switch (like.type()) {
            case nlohmann::json::value_t::boolean:
                if (text == "true" || text == "1" || text == "on") return true;
                if (text == "false" || text == "0" || text == "off") return false;
                break;
            case nlohmann::json::value_t::number_integer:
            case nlohmann::json::value_t::number_unsigned: {
                std::size_t used = 0;
                const long long v = std::stoll(text, &used);
                if (used == text.size()) {
                    if (like.is_number_unsigned() && v < 0) break;
                    return like.is_number_unsigned() ? nlohmann::json(static_cast<std::uint64_t>(v)) : nlohmann::json(v);
                }
                break;
            }
            case nlohmann::json::value_t::number_float: {
                std::size_t used = 0;
                const double v = std::stod(text, &used);
                if (used == text.size()) return v;
                break;
            }
            case nlohmann::json::value_t::string: return text;
            case nlohmann::json::value_t::array: {
                nlohmann::json arr = nlohmann::json::array();
                const auto items = split(text, ',');
                if (items.size() != like.size()) break;
                for (std::size_t i = 0; i < items.size(); ++i) arr.push_back(parse_like(like[i], key, items[i]));
                return arr;
            }
            default: break;
        }
    } catch (const std::logic_error&) {
    }
    throw ConfigError("invalid value for " + key + ": '" + text + "'");
}

void flatten(const nlohmann::json& j, const std::string& prefix, std::map<std::string, std::string>& out) {
    for (const auto& [k, v] : j.items()) {
        const std::string key = prefix.empty() ? k : prefix + "." + k;
        if (v.is_object()) {
            flatten(v, key, out);
        } else if (v.is_array() && v.size() == 3) {
            for (std::size_t i = 0; i < 3; ++i) out[key + "." + kModalityKeys[i]] = v[i].dump();
        } else {
            out[key] = v.is_string() ? v.get<std::string>() : v.dump();
        }
    }
}

TrainOptions train_options_from(const nlohmann::json& j) {
    TrainOptions o;
    o.p = j.value("p", o.p);
    o.k = j.value("k", o.k);
    o.eval_every = j.value("eval_every", o.eval_every);
    o.metric = distance_metric_from_string(j.value("metric", std::string("cosine")));
    return o;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IOError("cannot write " + path.string());
    out << text;
}

void ensure_dir(const std::string& dir) {
    if (dir.empty()) throw ConfigError("an output directory is required");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IOError("cannot create " + dir + ": " + ec.message());
}

void snapshot(const RunConfig& cfg, const std::string& dir, const std::string& command) {
    ensure_dir(dir);
    write_text(fs::path(dir) / "resolved_config.txt", "# " + command + "\n" + cfg.to_text());
}

PerModality<bool> parse_blank(const std::string& spec) {
    PerModality<bool> blank{false, false, false};
    for (char c : spec) {
        switch (std::toupper(static_cast<unsigned char>(c))) {
            case 'R': blank[0] = true; break;
            case 'N': blank[1] = true; break;
            case 'T': blank[2] = true; break;
            default: throw ConfigError("blank captions: expected letters from R, N, T, got '" + spec + "'");
        }
    }
    return blank;
}

std::string blank_name(const PerModality<bool>& blank) {
    std::string s;
    if (blank[0]) s += 'R';
    if (blank[1]) s += 'N';
    if (blank[2]) s += 'T';
    return "M(" + s + ")";
}

nlohmann::json result_with_blank(const RetrievalResult& r, Variant v, std::uint64_t seed, const PerModality<bool>& blank) {
    nlohmann::json j = results_json(r, std::string(to_string(v)), seed);
    if (blank[0] || blank[1] || blank[2]) j["blank_captions"] = blank_name(blank);
    return j;
}

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); }
};

nlohmann::json train_cell(const RunConfig& cfg, const PreparedData& data, Variant variant, std::uint64_t seed,
                          const std::string& dir, std::optional<IdeaModel>* model_out) {
    ensure_dir(dir);
    RunConfig cell = cfg;
    cell.variant = variant;
    cell.seed = seed;
    cell.out_dir = dir;
    snapshot(cell, dir, "train");
    TrainOptions opts = cfg.train;
    opts.metrics_path = (fs::path(dir) / "metrics.jsonl").string();
    Timer timer;
    TrainResult trained = train(data, cfg.model, cfg.loss, variant, seed, opts);
    save_checkpoint((fs::path(dir) / "checkpoint.bin").string(), trained.model,
                    {{"seed", seed}, {"num_train_identities", data.manifest.identities_in(Split::Train).size()}});
    const RetrievalResult r = evaluate(trained.model, data, cfg.train.metric);
    nlohmann::json res = results_json(r, std::string(to_string(variant)), seed);
    res["train_seconds"] = timer.seconds();
    write_text(fs::path(dir) / "results.json", res.dump(2) + "\n");
    if (model_out) model_out->emplace(std::move(trained.model));
    return res;
}

// ---- subcommands ----

int cmd_synth(const RunConfig& cfg) {
    snapshot(cfg, cfg.out_dir, "synth-data");
    const DatasetManifest m = generate_dataset(cfg.synth, cfg.out_dir);
    std::cout << "wrote " << m.samples.size() << " samples (" << m.samples.size() * 3 << " images) to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_annotate(const RunConfig& cfg, const std::string& endpoint, const std::string& style, const std::string& output) {
    const DatasetManifest m = load_manifest(cfg.data_dir);
    const std::string out_dir = cfg.out_dir.empty() ? cfg.data_dir : cfg.out_dir;
    snapshot(cfg, out_dir, "annotate");
    std::unique_ptr<MllmClient> client;
    RetryPolicy retry;
    if (!endpoint.empty()) {
        client = std::make_unique<HttpMllmClient>(HttpClientConfig::from_environment(endpoint));
    } else {
        // the mock describes what the dataset's own caption records say
        std::map<std::string, AttributeRecord> by_image;
        const fs::path captions = fs::path(m.root) / m.caption_file;
        std::map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < m.samples.size(); ++i) index[m.samples[i].sample_id] = i;
        if (fs::exists(captions))
            for (const auto& rec : read_caption_file(captions.string()))
                if (auto it = index.find(rec.sample_id); it != index.end())
                    by_image[m.samples[it->second].images[index_of(rec.modality)]] = rec.attributes;
        auto oracle = [by_image](const ImageRef& ref, SubjectKind kind) {
            const auto it = by_image.find(ref.uri);
            return it != by_image.end() ? it->second : MockMllmClient::hashed_attributes(ref, kind);
        };
        client = std::make_unique<MockMllmClient>(style == "verbose" ? MockMllmClient::Style::Verbose : MockMllmClient::Style::Template,
                                                  oracle);
        retry.backoff_base = std::chrono::milliseconds(0);
    }
    std::vector<CaptionRecord> records;
    for (const auto& s : m.samples)
        for (Modality mod : kModalities) {
            const ImageRef ref{s.images[index_of(mod)]};
            const Caption c = annotate_image(ref, mod, m.subject, *client, retry);
            AttributeRecord attrs = AttributeRecord::unknown(m.subject);
            try {
                attrs = extract_attributes(c.text, m.subject);
            } catch (const UnparseableCaption&) {
            }
            records.push_back(CaptionRecord{s.sample_id, mod, c.text, attrs});
        }
    const std::string path = output.empty() ? (fs::path(out_dir) / "captions_annotated.jsonl").string() : output;
    write_caption_file(path, records);
    std::cout << "wrote " << records.size() << " captions to " << path << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    const PreparedData data = prepare_data(load_dataset(cfg.data_dir), cfg.model);
    ensure_dir(cfg.out_dir);
    const nlohmann::json res = train_cell(cfg, data, cfg.variant, cfg.seed, cfg.out_dir, nullptr);
    std::cout << res.dump() << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& blank_spec, const std::string& query,
             int top_n) {
    nlohmann::json extra;
    const IdeaModel model = load_checkpoint(checkpoint, &extra);
    const PreparedData data = prepare_data(load_dataset(cfg.data_dir), model.config());
    const auto blank = parse_blank(blank_spec);
    const RetrievalResult r = evaluate(model, data, cfg.train.metric, blank);
    const std::uint64_t seed = extra.value("seed", cfg.seed);
    nlohmann::json res = result_with_blank(r, model.variant(), seed, blank);
    if (!query.empty()) {
        EvalSet qs, gs;
        const auto qi = data.manifest.indices_in(Split::Query), gi = data.manifest.indices_in(Split::Gallery);
        for (auto i : qi) qs.sample_ids.push_back(data.manifest.samples[i].sample_id), qs.identities.push_back(data.identities[i]),
            qs.cameras.push_back(data.cameras[i]);
        for (auto i : gi) gs.sample_ids.push_back(data.manifest.samples[i].sample_id), gs.identities.push_back(data.identities[i]),
            gs.cameras.push_back(data.cameras[i]);
        const Eigen::MatrixXd d =
            distance_matrix(extract_features(model, data, qi, blank), extract_features(model, data, gi, blank), cfg.train.metric);
        res["rank_list"] = {{"query", query}, {"entries", rank_list(d, qs, gs, query, top_n)}};
    }
    if (!cfg.out_dir.empty()) {
        snapshot(cfg, cfg.out_dir, "eval");
        write_text(fs::path(cfg.out_dir) / "results.json", res.dump(2) + "\n");
    }
    std::cout << res.dump() << "\n";
    return 0;
}

int cmd_inspect(const RunConfig& cfg, const std::string& checkpoint, const std::string& split_name, int limit,
                const std::string& output) {
    const IdeaModel model = load_checkpoint(checkpoint);
    if (model.variant() != Variant::Idea) throw ConfigError("inspect-offsets needs a checkpoint of the idea variant");
    const PreparedData data = prepare_data(load_dataset(cfg.data_dir), model.config());
    auto indices = data.manifest.indices_in(split_from_string(split_name));
    if (limit > 0 && static_cast<std::size_t>(limit) < indices.size()) indices.resize(static_cast<std::size_t>(limit));
    const Eigen::Index ns = model.cda()->config().num_sampled();
    nlohmann::json records = nlohmann::json::array();
    auto rows = [](const Eigen::MatrixXd& m, Eigen::Index start, Eigen::Index count) {
        nlohmann::json a = nlohmann::json::array();
        for (Eigen::Index r = start; r < start + count; ++r) a.push_back({m(r, 0), m(r, 1)});
        return a;
    };
    for (std::size_t start = 0; start < indices.size(); start += 32) {
        std::vector<SampleInput> batch;
        const std::size_t end = std::min(indices.size(), start + 32);
        for (std::size_t i = start; i < end; ++i) {
            SampleInput s;
            for (std::size_t m = 0; m < 3; ++m) s.patches[m] = &data.patches[indices[i]][m], s.text[m] = &data.text[indices[i]][m];
            batch.push_back(s);
        }
        ad::Tape<double> tape;
        tape.set_grad_enabled(false);
        const auto f = model.forward<double>(tape, batch);
        const Eigen::MatrixXd ref = f.cda->reference, off = f.cda->offsets.value(), pos = f.cda->positions.value();
        for (std::size_t i = start; i < end; ++i) {
            const Eigen::Index b = static_cast<Eigen::Index>(i - start);
            records.push_back({{"sample_id", data.manifest.samples[indices[i]].sample_id},
                               {"grid", {model.cda()->config().sampled_rows(), model.cda()->config().sampled_cols()}},
                               {"P", rows(ref, b * ns, ns)},
                               {"dP", rows(off, b * ns, ns)},
                               {"P_hat", rows(pos, b * ns, ns)}});
        }
    }
    const std::string out_dir = cfg.out_dir.empty() ? fs::path(output).parent_path().string() : cfg.out_dir;
    if (!out_dir.empty()) snapshot(cfg, out_dir, "inspect-offsets");
    const std::string path = output.empty() ? (fs::path(cfg.out_dir) / "offsets.json").string() : output;
    write_text(path, records.dump(1) + "\n");
    std::cout << "wrote offsets of " << records.size() << " samples to " << path << "\n";
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const AblationOptions& opts) {
    const nlohmann::json report = run_ablation(cfg, opts);
    std::printf("%-14s %6s %9s %8s %8s\n", "variant", "seeds", "mean_mAP", "std", "mean_R1");
    for (const auto& row : report.at("aggregates"))
        std::printf("%-14s %6d %9.4f %8.4f %8.4f%s\n", row.at("variant").get<std::string>().c_str(), row.at("seeds").get<int>(),
                    row.at("mean_mAP").get<double>(), row.at("std_mAP").get<double>(), row.at("mean_R1").get<double>(),
                    row.at("failed_cells").get<int>() > 0 ? "  (failed cells)" : "");
    if (report.contains("text_missing_aggregates"))
        for (const auto& row : report.at("text_missing_aggregates"))
            std::printf("idea %-9s %22.4f\n", row.at("blank_captions").get<std::string>().c_str(), row.at("mean_mAP").get<double>());
    std::cout << "report: " << (fs::path(cfg.out_dir) / "report.json").string() << "\n";
    for (const auto& [key, cell] : report.at("cells").items())
        if (cell.at("status") != "ok") std::cout << "FAILED " << key << ": " << cell.value("error", "") << "\n";
    return 0;
}

}  // namespace

// ---- RunConfig ----

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.loss.lr_init = 1e-3;
    c.loss.lr_final = 1e-4;
    c.loss.epochs = 30;
    return c;
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json t = train;
    return nlohmann::json{{"synth", synth},
                          {"model", model},
                          {"loss", loss},
                          {"train", t},
                          {"run", {{"seed", seed}, {"variant", to_string(variant)}, {"data", data_dir}, {"out", out_dir}}}};
}

void RunConfig::set(const std::string& raw_key, const std::string& raw_value) {
    const std::string key = trim(raw_key), value = trim(raw_value);
    nlohmann::json j = to_json();
    const auto parts = split(key, '.');
    if (parts.size() < 2) throw ConfigError("config key needs a section: " + key);
    nlohmann::json* node = &j;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const std::string& p = parts[i];
        if (node->is_array()) {
            const auto it = std::find(std::begin(kModalityKeys), std::end(kModalityKeys), p);
            if (it == std::end(kModalityKeys) || node->size() != 3) throw ConfigError("unknown config key: " + key);
            node = &(*node)[static_cast<std::size_t>(it - std::begin(kModalityKeys))];
        } else if (node->is_object() && node->contains(p)) {
            node = &(*node)[p];
        } else {
            throw ConfigError("unknown config key: " + key);
        }
    }
    *node = parse_like(*node, key, value);
    synth = j.at("synth").get<SynthConfig>();
    model = j.at("model").get<ModelConfig>();
    loss = j.at("loss").get<LossConfig>();
    train = train_options_from(j.at("train"));
    const auto& r = j.at("run");
    seed = r.at("seed").get<std::uint64_t>();
    variant = variant_from_string(r.at("variant").get<std::string>());
    data_dir = r.at("data").get<std::string>();
    out_dir = r.at("out").get<std::string>();
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot read config file: " + path);
    int line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
        set(line.substr(0, eq), line.substr(eq + 1));
    }
}

std::string RunConfig::to_text() const {
    std::map<std::string, std::string> flat;
    flatten(to_json(), "", flat);
    std::string out;
    for (const auto& [k, v] : flat) out += k + " = " + v + "\n";
    // values that 0 leaves to the model
    const CdaConfig cda = model.cda_config();
    out += "# derived: model.inverse_hidden = " + std::to_string(model.inverse_hidden_dim()) + "\n";
    out += "# derived: model.mixer_kernel_h = " + std::to_string(cda.kernel_h) + "\n";
    out += "# derived: model.mixer_kernel_w = " + std::to_string(cda.kernel_w) + "\n";
    return out;
}

void RunConfig::validate() const {
    synth.validate();
    model.validate();
    loss.validate();
    if (train.p < 1 || train.k < 1) throw ConfigError("train: P and K must be >= 1");
}

nlohmann::json run_ablation(const RunConfig& cfg, const AblationOptions& options) {
    ensure_dir(cfg.out_dir);
    snapshot(cfg, cfg.out_dir, "ablate");
    Timer total;
    const PreparedData data = prepare_data(load_dataset(cfg.data_dir), cfg.model);
    nlohmann::json cells = nlohmann::json::object();    // "<variant>/<seed>"
    nlohmann::json missing = nlohmann::json::object();  // "idea/<seed>" -> "M(..)"
    std::map<std::string, std::vector<double>> maps, r1s;
    std::map<std::string, std::vector<double>> missing_maps;
    const std::vector<std::string> subsets{"R", "N", "T", "RN", "RT", "NT", "RNT"};

    for (Variant v : options.variants)
        for (std::uint64_t seed : options.seeds) {
            const std::string name = std::string(to_string(v)) + "_s" + std::to_string(seed);
            const std::string dir = (fs::path(cfg.out_dir) / "cells" / name).string();
            nlohmann::json cell{{"variant", to_string(v)}, {"seed", seed}};
            std::optional<IdeaModel> model;
            try {
                const nlohmann::json res = train_cell(cfg, data, v, seed, dir, &model);
                cell.update(res);
                cell["status"] = "ok";
                maps[std::string(to_string(v))].push_back(res.at("mAP").get<double>());
                r1s[std::string(to_string(v))].push_back(res.at("cmc").at("1").get<double>());
                log_info("ablation cell " + name + " mAP " + std::to_string(res.at("mAP").get<double>()));
            } catch (const std::exception& e) {
                cell["status"] = "failed";
                cell["error"] = e.what();
                log_error("ablation cell " + name + " failed: " + e.what());
            }
            const std::string key = std::string(to_string(v)) + "/" + std::to_string(seed);
            cells[key] = cell;
            if (!model || v != Variant::Idea || !options.text_missing) continue;
            for (const auto& subset : subsets) {
                const auto blank = parse_blank(subset);
                nlohmann::json m{{"blank_captions", blank_name(blank)}};
                try {
                    const RetrievalResult r = evaluate(*model, data, cfg.train.metric, blank);
                    m.update(result_with_blank(r, v, seed, blank));
                    m["status"] = "ok";
                    missing_maps[blank_name(blank)].push_back(r.mAP);
                } catch (const std::exception& e) {
                    m["status"] = "failed";
                    m["error"] = e.what();
                }
                missing[key][blank_name(blank)] = m;
            }
        }

    auto mean = [](const std::vector<double>& v) { return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
    auto stddev = [&](const std::vector<double>& v) {
        if (v.size() < 2) return 0.0;
        const double mu = mean(v);
        double s = 0;
        for (double x : v) s += (x - mu) * (x - mu);
        return std::sqrt(s / double(v.size() - 1));
    };
    nlohmann::json aggregates = nlohmann::json::array();
    for (Variant v : options.variants) {
        const std::string n(to_string(v));
        const auto failed = static_cast<std::size_t>(options.seeds.size()) - maps[n].size();
        aggregates.push_back({{"variant", n},
                              {"seeds", maps[n].size()},
                              {"failed_cells", failed},
                              {"mean_mAP", mean(maps[n])},
                              {"std_mAP", stddev(maps[n])},
                              {"mean_R1", mean(r1s[n])}});
    }
    nlohmann::json report{{"cells", cells}, {"aggregates", aggregates}, {"config", cfg.to_json()}};
    if (options.text_missing && !missing.empty()) {
        nlohmann::json agg = nlohmann::json::array();
        agg.push_back({{"blank_captions", "none"}, {"mean_mAP", mean(maps["idea"])}});
        for (const auto& subset : subsets) {
            const std::string n = blank_name(parse_blank(subset));
            agg.push_back({{"blank_captions", n}, {"mean_mAP", mean(missing_maps[n])}});
        }
        report["text_missing"] = missing;
        report["text_missing_aggregates"] = agg;
    }
    report["total_seconds"] = total.seconds();
    write_text(fs::path(cfg.out_dir) / "report.json", report.dump(2) + "\n");
    return report;
}

int run(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
}

int run(int argc, const char* const* argv) {
    CLI::App app{"Multi-modal re-identification with inverted text features and deformable aggregation", "idea"};
    app.require_subcommand(1);
    std::string config_file, log_level = "info";
    std::vector<std::string> overrides;
    std::string data_dir, out_dir, variant, checkpoint, endpoint, style = "template", output, blank, query, split_name = "query",
                                                                   seeds, variants;
    std::uint64_t seed = 0;
    int top_n = 10, limit = 0;
    bool no_text_missing = false;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_file, "Config file of key = value lines");
        sub->add_option("--set", overrides, "Override one config key (key=value); repeatable");
        sub->add_option("--log-level", log_level, "debug, info, warning or error");
    };
    auto* synth = app.add_subcommand("synth-data", "Generate a synthetic multi-modal dataset");
    synth->add_option("--out", out_dir, "Output directory")->required();
    synth->add_option("--seed", seed, "Dataset seed");
    common(synth);
    auto* annotate = app.add_subcommand("annotate", "Caption every image with an MLLM client");
    annotate->add_option("--data", data_dir, "Dataset directory")->required();
    annotate->add_option("--endpoint", endpoint, "HTTP endpoint of a captioning service (default: built-in mock)");
    annotate->add_option("--style", style, "Mock reply style: template or verbose");
    annotate->add_option("--output", output, "Caption file to write");
    annotate->add_option("--out", out_dir, "Run directory");
    common(annotate);
    auto* trn = app.add_subcommand("train", "Train one variant");
    trn->add_option("--data", data_dir, "Dataset directory")->required();
    trn->add_option("--variant", variant, "baseline, parallel_text, imfe or idea");
    trn->add_option("--seed", seed, "Training seed");
    trn->add_option("--out", out_dir, "Run directory (default: runs/<variant>_s<seed>)");
    common(trn);
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the query/gallery split");
    ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    ev->add_option("--data", data_dir, "Dataset directory")->required();
    ev->add_option("--blank", blank, "Modalities whose captions are blanked, e.g. RNT");
    ev->add_option("--rank-list", query, "Export the rank list of this query sample id");
    ev->add_option("--top-n", top_n, "Rank list length");
    ev->add_option("--out", out_dir, "Run directory");
    common(ev);
    auto* abl = app.add_subcommand("ablate", "Train and evaluate every variant for every seed");
    abl->add_option("--data", data_dir, "Dataset directory")->required();
    abl->add_option("--seeds", seeds, "Comma-separated seeds (default 1,2,3)");
    abl->add_option("--variants", variants, "Comma-separated variants (default all four)");
    abl->add_flag("--no-text-missing", no_text_missing, "Skip the blank-caption evaluations");
    abl->add_option("--out", out_dir, "Run directory (default: runs/ablation)");
    common(abl);
    auto* insp = app.add_subcommand("inspect-offsets", "Export sampling grids of an idea checkpoint");
    insp->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    insp->add_option("--data", data_dir, "Dataset directory")->required();
    insp->add_option("--split", split_name, "train, query or gallery");
    insp->add_option("--limit", limit, "At most this many samples (0 = all)");
    insp->add_option("--output", output, "JSON file to write");
    insp->add_option("--out", out_dir, "Run directory");
    common(insp);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return 1;
    }

    RunConfig cfg = RunConfig::defaults();
    try {
        if (log_level == "debug") set_log_level(LogLevel::Debug);
        else if (log_level == "info") set_log_level(LogLevel::Info);
        else if (log_level == "warning") set_log_level(LogLevel::Warning);
        else if (log_level == "error") set_log_level(LogLevel::Error);
        else throw ConfigError("unknown log level: " + log_level);

        if (!config_file.empty()) cfg.load_file(config_file);
        for (const auto& o : overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
            cfg.set(o.substr(0, eq), o.substr(eq + 1));
        }
        if (!data_dir.empty()) cfg.data_dir = data_dir;
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (!variant.empty()) cfg.variant = variant_from_string(variant);
        if (seed != 0) {
            cfg.seed = seed;
            cfg.synth.seed = seed;
        }
        cfg.validate();
    } catch (const ConfigError& e) {
        log_error(e.what());
        return 1;
    } catch (const IOError& e) {
        log_error(e.what());
        return 1;
    }

    try {
        if (*synth) return cmd_synth(cfg);
        if (*annotate) return cmd_annotate(cfg, endpoint, style, output);
        if (*trn) {
            if (cfg.out_dir.empty())
                cfg.out_dir = (fs::path("runs") / (std::string(to_string(cfg.variant)) + "_s" + std::to_string(cfg.seed))).string();
            return cmd_train(cfg);
        }
        if (*ev) return cmd_eval(cfg, checkpoint, blank, query, top_n);
        if (*abl) {
            AblationOptions opts;
            if (!seeds.empty()) {
                opts.seeds.clear();
                for (const auto& s : split(seeds, ',')) opts.seeds.push_back(std::stoull(s));
            }
            if (!variants.empty()) {
                opts.variants.clear();
                for (const auto& v : split(variants, ',')) opts.variants.push_back(variant_from_string(v));
            }
            opts.text_missing = !no_text_missing;
            if (cfg.out_dir.empty()) cfg.out_dir = "runs/ablation";
            return cmd_ablate(cfg, opts);
        }
        if (*insp) {
            if (cfg.out_dir.empty() && output.empty()) cfg.out_dir = "runs/offsets";
            return cmd_inspect(cfg, checkpoint, split_name, limit, output);
        }
    } catch (const ConfigError& e) {
        log_error(e.what());
        return 1;
    } catch (const std::exception& e) {
        log_error(e.what());
        return 2;
    }
    return 1;
}

}  // namespace idea
