// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "idea/losses.hpp"
#include "idea/model.hpp"
#include "idea/retrieval.hpp"
#include "idea/synth_data.hpp"

namespace idea {

struct LossConfig {
    double smoothing_eps = 0.1;
    double triplet_margin = 0.3;
    double lr_init = 3.5e-6;
    double lr_final = 3.5e-7;
    int epochs = 60;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

/// Cosine decay from lr_init at epoch 0 to lr_final at the last epoch.
double learning_rate(const LossConfig& cfg, int epoch);

/// Decoupled weight decay Adam over every trainable parameter of a store.
class AdamW {
public:
    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 1e-4);
    void step(ParameterStore& store, double lr);
    long steps() const { return t_; }

private:
    double beta1_, beta2_, eps_, weight_decay_;
    long t_ = 0;
    std::map<std::string, std::pair<Eigen::MatrixXd, Eigen::MatrixXd>> moments_;
};

/// Independent bias-free linear classifiers, one per trained feature.
class HeadBank {
public:
    HeadBank(ParameterStore& store, const std::vector<std::string>& features, int in_dim, int num_classes, std::mt19937_64& rng);
    /// Reattaches to heads that already exist in the store (e.g. after loading).
    HeadBank(ParameterStore& store, const std::vector<std::string>& features);

    static std::string parameter_name(const std::string& feature) { return "head." + feature + ".weight"; }
    const std::vector<std::string>& features() const { return features_; }
    int num_classes() const;

    template <typename Scalar>
    ad::Var<Scalar> logits(ad::Tape<Scalar>& tape, std::size_t i, const ad::Var<Scalar>& feature) const {
        return ad::linear(feature, tape.param(store_->at(parameter_name(features_.at(i)))));
    }

private:
    ParameterStore* store_;
    std::vector<std::string> features_;
};

/// Classification and metric losses applied to every trained feature.
template <typename Scalar>
struct LossFunctions {
    std::function<ad::Var<Scalar>(const ad::Var<Scalar>& logits, const std::vector<int>& labels)> ce;
    std::function<ad::Var<Scalar>(const ad::Var<Scalar>& features, const std::vector<int>& labels)> triplet;

    static LossFunctions standard(const LossConfig& cfg) {
        LossFunctions f;
        const double eps = cfg.smoothing_eps, margin = cfg.triplet_margin;
        f.ce = [eps](const ad::Var<Scalar>& l, const std::vector<int>& y) { return ad::label_smoothing_ce(l, y, eps); };
        f.triplet = [margin](const ad::Var<Scalar>& x, const std::vector<int>& y) { return ad::batch_hard_triplet(x, y, margin); };
        return f;
    }
};

template <typename Scalar>
struct ObjectiveTerms {
    ad::Var<Scalar> total;
    std::vector<std::string> features;
    std::vector<ad::Var<Scalar>> ce;
    std::vector<ad::Var<Scalar>> triplet;

    /// {"<feature>.ce": .., "<feature>.tri": .., "total": ..}
    nlohmann::json report() const {
        nlohmann::json j;
        for (std::size_t i = 0; i < features.size(); ++i) {
            j[features[i] + ".ce"] = double(ce[i].value()(0, 0));
            j[features[i] + ".tri"] = double(triplet[i].value()(0, 0));
        }
        j["total"] = double(total.value()(0, 0));
        return j;
    }
};

/// Σ over the variant's trained features of CE(head(feature)) + triplet(feature).
template <typename Scalar>
ObjectiveTerms<Scalar> objective(const BatchFeatures<Scalar>& bundle, const std::vector<int>& labels, const HeadBank& heads,
                                 const LossFunctions<Scalar>& losses) {
    if (heads.features() != bundle.loss_feature_names) throw ConfigError("objective: heads do not match the trained features");
    ObjectiveTerms<Scalar> out;
    out.features = bundle.loss_feature_names;
    std::vector<ad::Var<Scalar>> parts;
    for (std::size_t i = 0; i < bundle.loss_features.size(); ++i) {
        ad::Tape<Scalar>& tape = *bundle.loss_features[i].tape();
        out.ce.push_back(losses.ce(heads.logits(tape, i, bundle.loss_features[i]), labels));
        out.triplet.push_back(losses.triplet(bundle.loss_features[i], labels));
        parts.push_back(out.ce.back());
        parts.push_back(out.triplet.back());
    }
    out.total = ad::sum(ad::concat_rows(parts));
    return out;
}

/// Model-ready inputs for every sample of a dataset.
struct PreparedData {
    DatasetManifest manifest;
    std::vector<PerModality<Eigen::MatrixXf>> patches;
    std::vector<PerModality<TextSequence>> text;
    PerModality<TextSequence> blank;  // prefix-only sequences for missing captions
    std::vector<int> identities;
    std::vector<int> cameras;
};

PreparedData prepare_data(const Dataset& dataset, const ModelConfig& cfg);

struct TrainOptions {
    int p = 8;
    int k = 4;
    int eval_every = 0;  // epochs between evaluations logged in the metrics; 0 = final epoch only
    DistanceMetric metric = DistanceMetric::Cosine;
    std::string metrics_path;  // JSON lines, one per epoch; empty = not written
};

void to_json(nlohmann::json& j, const TrainOptions& o);

struct TrainResult {
    IdeaModel model;
    std::vector<nlohmann::json> metrics;
};

/// Deterministic given the seed: data order, initialisation and dropout all derive from it.
TrainResult train(const PreparedData& data, const ModelConfig& model_cfg, const LossConfig& loss_cfg, Variant variant,
                  std::uint64_t seed, const TrainOptions& options = {});

/// Retrieval vectors for the listed samples; captions of modalities flagged
/// in `blank` are replaced by the empty string.
Eigen::MatrixXd extract_features(const IdeaModel& model, const PreparedData& data, const std::vector<std::size_t>& samples,
                                 PerModality<bool> blank = {false, false, false});

/// Query/gallery evaluation of the manifest's evaluation split.
RetrievalResult evaluate(const IdeaModel& model, const PreparedData& data, DistanceMetric metric = DistanceMetric::Cosine,
                         PerModality<bool> blank = {false, false, false});

}  // namespace idea
