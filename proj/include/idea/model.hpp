// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "idea/autodiff.hpp"
#include "idea/cda.hpp"
#include "idea/image.hpp"
#include "idea/modality.hpp"
#include "idea/ops.hpp"
#include "idea/parameter.hpp"
#include "idea/tokenizer.hpp"

namespace idea {

/// Which retrieval feature a model produces and which features are trained.
enum class Variant { Baseline, ParallelText, Imfe, Idea };

std::string_view to_string(Variant v);
Variant variant_from_string(std::string_view s);

struct ModelConfig {
    int image_height = 64;
    int image_width = 32;
    int patch_size = 8;
    int text_width = 64;     // C_text
    int vision_width = 64;   // C'
    int embed_dim = 64;      // C
    int text_depth = 2;
    int vision_depth = 2;
    int heads = 4;
    int mlp_ratio = 4;
    int context_length = 77;
    int num_prompts = 2;     // N_p
    int inverse_hidden = 0;  // 0: 4·C_text
    double inverse_dropout = 0.1;
    bool freeze_text = false;
    bool strict_context = false;
    // deformable aggregation
    int mixer_kernel_h = 0;  // 0: map height / 2
    int mixer_kernel_w = 0;  // 0: map width / 2
    double offset_scale = 5.0;  // k
    int cda_heads = 4;
    bool mixer_bias = true;
    SubjectKind subject = SubjectKind::Person;

    int grid_height() const { return image_height / patch_size; }
    int grid_width() const { return image_width / patch_size; }
    int num_patches() const { return grid_height() * grid_width(); }  // N_l
    int inverse_hidden_dim() const { return inverse_hidden > 0 ? inverse_hidden : 4 * text_width; }
    CdaConfig cda_config() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Pooled text feature: the end-token state alone when there are no prompt
/// tokens, otherwise the mean of the end-token and every prompt-token state.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, 1, Eigen::Dynamic> pool_text_states(const Eigen::MatrixBase<Derived>& states,
                                                                            int end_position,
                                                                            std::span<const int> prompt_positions) {
    Eigen::Matrix<typename Derived::Scalar, 1, Eigen::Dynamic> acc = states.row(end_position);
    for (int p : prompt_positions) acc += states.row(p);
    return acc / typename Derived::Scalar(prompt_positions.size() + 1);
}

/// Inputs of one sample: flattened patches and tokenized captions per modality.
struct SampleInput {
    PerModality<const Eigen::MatrixXf*> patches{};
    PerModality<const TextSequence*> text{};
};

/// Batched features on a tape. Row blocks are ordered by sample.
template <typename Scalar>
struct BatchFeatures {
    int batch = 0;
    PerModality<ad::Var<Scalar>> pooled_text;  // f̂ᵗ_m, B × C_text
    PerModality<ad::Var<Scalar>> pseudo;       // fᵗ_m, B × C'
    PerModality<ad::Var<Scalar>> vision;       // F_m, B·(N_l+2) × C
    ad::Var<Scalar> global;                    // F_G, B·6 × C
    std::optional<CdaTrace<Scalar>> cda;
    ad::Var<Scalar> global_v, global_t, cda_v, cda_t;  // B × 3C
    ad::Var<Scalar> text_concat;               // parallel-text feature, B × 3C
    std::vector<ad::Var<Scalar>> loss_features;  // one per classifier head
    std::vector<std::string> loss_feature_names;
    ad::Var<Scalar> retrieval;
};

/// All features of one sample as plain matrices.
struct FeatureBundle {
    PerModality<Eigen::VectorXd> f_hat_t;  // C_text
    PerModality<Eigen::VectorXd> f_t;      // C'
    PerModality<Eigen::MatrixXd> F_m;      // (N_l+2) × C
    Eigen::MatrixXd F_G;                   // 6 × C
    Eigen::MatrixXd F_S;                   // 3N_S × C (empty unless the CDA runs)
    Eigen::MatrixXd F_CDA;                 // 6 × C (empty unless the CDA runs)
    Eigen::VectorXd F_G_v, F_G_t, F_CDA_v, F_CDA_t;  // 3C
    Eigen::VectorXd retrieval;
};

/// Dual encoder with modal prefixes, InverseNet pseudo tokens, per-modality
/// vision towers and (for the full variant) deformable aggregation.
class IdeaModel {
public:
    IdeaModel(const ModelConfig& cfg, Variant variant, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    Variant variant() const { return variant_; }
    ParameterStore& parameters() { return *store_; }
    const ParameterStore& parameters() const { return *store_; }
    const DeformableAggregation* cda() const { return cda_.get(); }

    bool uses_text() const { return variant_ != Variant::Baseline; }
    bool uses_pseudo_token() const { return variant_ == Variant::Imfe || variant_ == Variant::Idea; }
    int num_loss_features() const;
    int retrieval_dim() const;

    /// Text transformer over a batch of sequences; returns pooled B × C_text.
    template <typename Scalar>
    ad::Var<Scalar> text_features(ad::Tape<Scalar>& tape, std::span<const TextSequence* const> seqs) const;

    /// Two-layer MLP with GELU and dropout (active only on a training tape).
    template <typename Scalar>
    ad::Var<Scalar> inverse_net(ad::Tape<Scalar>& tape, const ad::Var<Scalar>& pooled,
                                std::array<MatrixX<Scalar>, 2>* masks = nullptr) const;

    /// Vision tower of one modality: tokens [pseudo, patches, class] → B·(N_l+2) × C.
    template <typename Scalar>
    ad::Var<Scalar> vision_features(ad::Tape<Scalar>& tape, Modality m, std::span<const Eigen::MatrixXf* const> patches,
                                    const ad::Var<Scalar>& pseudo) const;

    template <typename Scalar>
    BatchFeatures<Scalar> forward(ad::Tape<Scalar>& tape, std::span<const SampleInput> batch) const;

    // Evaluation-mode conveniences in double precision.
    Eigen::VectorXd encode_text(const TextSequence& seq) const;
    Eigen::VectorXd inverse_net(const Eigen::VectorXd& f_hat) const;
    Eigen::MatrixXd encode_vision(const Image& image, const Eigen::VectorXd& f_t, Modality m) const;
    FeatureBundle features(const SampleInput& sample) const;

    /// Drops parameter nodes of the given prefix from training.
    void set_trainable(const std::string& prefix, bool trainable);

private:
    template <typename Scalar>
    ad::Var<Scalar> transformer(ad::Tape<Scalar>& tape, const std::string& prefix, int depth, ad::Var<Scalar> x,
                                const std::vector<Eigen::Index>& lens, bool causal) const;

    ModelConfig cfg_;
    Variant variant_;
    std::unique_ptr<ParameterStore> store_;
    std::unique_ptr<DeformableAggregation> cda_;
};

}  // namespace idea
