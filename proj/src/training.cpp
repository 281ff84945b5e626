// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/training.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "idea/errors.hpp"
#include "idea/log.hpp"

namespace idea {
namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr int kEvalBatch = 64;

}  // namespace

void LossConfig::validate() const {
    if (!(smoothing_eps >= 0.0 && smoothing_eps < 1.0)) throw ConfigError("loss: smoothing_eps must lie in [0, 1)");
    if (!(triplet_margin >= 0.0)) throw ConfigError("loss: triplet margin must be >= 0");
    if (!(lr_init > 0.0) || !(lr_final >= 0.0) || lr_final > lr_init) throw ConfigError("loss: need 0 <= lr_final <= lr_init");
    if (epochs < 1) throw ConfigError("loss: epochs must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("loss: weight decay must be >= 0");
}

void to_json(nlohmann::json& j, const LossConfig& c) {
    j = nlohmann::json{{"smoothing_eps", c.smoothing_eps}, {"triplet_margin", c.triplet_margin}, {"lr_init", c.lr_init},
                       {"lr_final", c.lr_final},           {"epochs", c.epochs},                 {"weight_decay", c.weight_decay},
                       {"beta1", c.beta1},                 {"beta2", c.beta2},                   {"adam_eps", c.adam_eps}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
    LossConfig d;
    c.smoothing_eps = j.value("smoothing_eps", d.smoothing_eps);
    c.triplet_margin = j.value("triplet_margin", d.triplet_margin);
    c.lr_init = j.value("lr_init", d.lr_init);
    c.lr_final = j.value("lr_final", d.lr_final);
    c.epochs = j.value("epochs", d.epochs);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.adam_eps = j.value("adam_eps", d.adam_eps);
}

double learning_rate(const LossConfig& cfg, int epoch) {
    if (cfg.epochs <= 1) return cfg.lr_init;
    const double t = std::clamp(double(epoch) / double(cfg.epochs - 1), 0.0, 1.0);
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * t));
}

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void AdamW::step(ParameterStore& store, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (auto& [name, p] : store.items()) {
        if (!p.trainable || p.grad.size() == 0) continue;
        auto [it, fresh] = moments_.try_emplace(name);
        auto& [m, v] = it->second;
        if (fresh) {
            m = Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols());
            v = Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols());
        }
        m = beta1_ * m + (1.0 - beta1_) * p.grad;
        v = beta2_ * v + (1.0 - beta2_) * p.grad.cwiseAbs2();
        p.value *= 1.0 - lr * weight_decay_;
        p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    }
}

HeadBank::HeadBank(ParameterStore& store, const std::vector<std::string>& features, int in_dim, int num_classes,
                   std::mt19937_64& rng)
    : store_(&store), features_(features) {
    if (num_classes < 1) throw ConfigError("head bank: need at least one class");
    for (const auto& f : features_) store.add_normal(parameter_name(f), in_dim, num_classes, 0.01, rng);
}

HeadBank::HeadBank(ParameterStore& store, const std::vector<std::string>& features) : store_(&store), features_(features) {
    for (const auto& f : features_)
        if (!store.contains(parameter_name(f))) throw ConfigError("head bank: missing head for " + f);
}

int HeadBank::num_classes() const {
    return features_.empty() ? 0 : static_cast<int>(store_->at(parameter_name(features_.front())).value.cols());
}

PreparedData prepare_data(const Dataset& dataset, const ModelConfig& cfg) {
    const DatasetManifest& m = dataset.manifest;
    if (m.image_height != cfg.image_height || m.image_width != cfg.image_width)
        throw ConfigError("dataset images are " + std::to_string(m.image_height) + "x" + std::to_string(m.image_width) +
                          ", model expects " + std::to_string(cfg.image_height) + "x" + std::to_string(cfg.image_width));
    PreparedData d;
    d.manifest = m;
    const Tokenizer& tok = default_tokenizer();
    for (Modality mod : kModalities)
        d.blank[index_of(mod)] = tok.encode(mod, "", cfg.num_prompts, cfg.context_length, cfg.strict_context, cfg.subject);
    d.patches.resize(m.samples.size());
    d.text.resize(m.samples.size());
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        for (Modality mod : kModalities) {
            const std::size_t mi = index_of(mod);
            d.patches[i][mi] = patchify(dataset.images[i][mi], cfg.patch_size);
            d.text[i][mi] = tok.encode(mod, dataset.captions[i][mi], cfg.num_prompts, cfg.context_length, cfg.strict_context,
                                       cfg.subject);
        }
        d.identities.push_back(m.samples[i].identity);
        d.cameras.push_back(m.samples[i].camera);
    }
    return d;
}

void to_json(nlohmann::json& j, const TrainOptions& o) {
    j = nlohmann::json{{"p", o.p},
                       {"k", o.k},
                       {"eval_every", o.eval_every},
                       {"metric", o.metric == DistanceMetric::Cosine ? "cosine" : "euclidean"}};
}

Eigen::MatrixXd extract_features(const IdeaModel& model, const PreparedData& data, const std::vector<std::size_t>& samples,
                                 PerModality<bool> blank) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(samples.size()), model.retrieval_dim());
    for (std::size_t start = 0; start < samples.size(); start += kEvalBatch) {
        const std::size_t end = std::min(samples.size(), start + kEvalBatch);
        std::vector<SampleInput> batch;
        for (std::size_t i = start; i < end; ++i) {
            SampleInput s;
            for (std::size_t m = 0; m < 3; ++m) {
                s.patches[m] = &data.patches[samples[i]][m];
                s.text[m] = blank[m] ? &data.blank[m] : &data.text[samples[i]][m];
            }
            batch.push_back(s);
        }
        ad::Tape<float> tape;
        tape.set_grad_enabled(false);
        const auto f = model.forward<float>(tape, batch);
        out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) = f.retrieval.value().cast<double>();
    }
    return out;
}

RetrievalResult evaluate(const IdeaModel& model, const PreparedData& data, DistanceMetric metric, PerModality<bool> blank) {
    const auto query = data.manifest.indices_in(Split::Query);
    const auto gallery = data.manifest.indices_in(Split::Gallery);
    if (gallery.empty()) throw EmptyGallery("evaluate: dataset has no gallery samples");
    const Eigen::MatrixXd qf = extract_features(model, data, query, blank);
    const Eigen::MatrixXd gf = extract_features(model, data, gallery, blank);
    std::vector<int> qi, qc, gi, gc;
    for (auto i : query) qi.push_back(data.identities[i]), qc.push_back(data.cameras[i]);
    for (auto i : gallery) gi.push_back(data.identities[i]), gc.push_back(data.cameras[i]);
    return cmc_map(distance_matrix(qf, gf, metric), qi, gi, qc, gc);
}

TrainResult train(const PreparedData& data, const ModelConfig& model_cfg, const LossConfig& loss_cfg, Variant variant,
                  std::uint64_t seed, const TrainOptions& options) {
    loss_cfg.validate();
    const auto train_ids = data.manifest.identities_in(Split::Train);
    if (train_ids.empty()) throw ConfigError("train: manifest has no train split");
    std::map<int, int> label_of;
    for (int id : train_ids) label_of.emplace(id, static_cast<int>(label_of.size()));

    IdeaModel model(model_cfg, variant, mix(seed, 1));
    std::mt19937_64 head_rng(mix(seed, 2));
    std::vector<std::string> head_features;
    {
        ad::Tape<double> probe;
        probe.set_grad_enabled(false);
        // feature names depend only on the variant; probe with one sample
        const auto idx = data.manifest.indices_in(Split::Train).front();
        SampleInput s;
        for (std::size_t m = 0; m < 3; ++m) s.patches[m] = &data.patches[idx][m], s.text[m] = &data.text[idx][m];
        head_features = model.forward<double>(probe, std::span<const SampleInput>(&s, 1)).loss_feature_names;
    }
    const int feature_dim = 3 * model_cfg.embed_dim;
    HeadBank heads(model.parameters(), head_features, feature_dim, static_cast<int>(train_ids.size()), head_rng);
    const auto losses = LossFunctions<float>::standard(loss_cfg);
    AdamW opt(loss_cfg.beta1, loss_cfg.beta2, loss_cfg.adam_eps, loss_cfg.weight_decay);

    std::ofstream metrics_out;
    if (!options.metrics_path.empty()) {
        metrics_out.open(options.metrics_path, std::ios::binary);
        if (!metrics_out) throw IOError("cannot write metrics log: " + options.metrics_path);
    }

    TrainResult result{std::move(model), {}};
    IdeaModel& net = result.model;
    for (int epoch = 0; epoch < loss_cfg.epochs; ++epoch) {
        const double lr = learning_rate(loss_cfg, epoch);
        const auto batches = pk_batches(data.manifest, options.p, options.k, mix(seed, 1000 + epoch));
        std::map<std::string, double> sums;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const Batch& b = batches[bi];
            std::vector<SampleInput> inputs;
            std::vector<int> labels;
            for (std::size_t i = 0; i < b.samples.size(); ++i) {
                SampleInput s;
                for (std::size_t m = 0; m < 3; ++m) s.patches[m] = &data.patches[b.samples[i]][m], s.text[m] = &data.text[b.samples[i]][m];
                inputs.push_back(s);
                labels.push_back(label_of.at(b.identities[i]));
            }
            ad::Tape<float> tape(true, mix(seed, (static_cast<std::uint64_t>(epoch) << 20) + bi));
            const auto features = net.forward<float>(tape, inputs);
            const auto terms = objective(features, labels, heads, losses);
            tape.backward(terms.total);
            net.parameters().zero_grad();
            tape.flush_param_grads();
            opt.step(net.parameters(), lr);
            const nlohmann::json report = terms.report();
            for (const auto& [k, v] : report.items()) sums[k] += v.get<double>();
        }
        nlohmann::json line{{"epoch", epoch + 1}, {"lr", lr}};
        nlohmann::json terms_json;
        for (const auto& [k, v] : sums) terms_json[k] = v / double(batches.size());
        line["loss_terms"] = terms_json;
        const bool last = epoch + 1 == loss_cfg.epochs;
        const bool periodic = options.eval_every > 0 && (epoch + 1) % options.eval_every == 0;
        if ((last || periodic) && !data.manifest.indices_in(Split::Gallery).empty()) {
            const RetrievalResult r = evaluate(net, data, options.metric);
            line["eval"] = {{"mAP", r.mAP}, {"R1", r.rank(1)}, {"R5", r.rank(5)}, {"R10", r.rank(10)}};
        }
        log_info("epoch " + std::to_string(epoch + 1) + "/" + std::to_string(loss_cfg.epochs) + " " + line.dump());
        if (metrics_out) metrics_out << line.dump() << '\n' << std::flush;
        result.metrics.push_back(std::move(line));
    }
    return result;
}

}  // namespace idea
