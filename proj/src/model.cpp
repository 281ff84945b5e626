// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/model.hpp"

#include <cmath>
#include <map>

#include "idea/errors.hpp"

namespace idea {
namespace {

std::string block_name(const std::string& prefix, int i) { return prefix + "block" + std::to_string(i) + "."; }

void add_block(ParameterStore& s, const std::string& p, int width, int mlp_ratio, int depth, std::mt19937_64& rng) {
    const double std_in = 1.0 / std::sqrt(double(width));
    const double std_out = std_in / std::sqrt(2.0 * std::max(depth, 1));
    s.add_constant(p + "ln1.gamma", 1, width, 1.0);
    s.add_zeros(p + "ln1.beta", 1, width);
    s.add_normal(p + "attn.qkv.weight", width, 3 * width, std_in, rng);
    s.add_zeros(p + "attn.qkv.bias", 1, 3 * width);
    s.add_normal(p + "attn.out.weight", width, width, std_out, rng);
    s.add_zeros(p + "attn.out.bias", 1, width);
    s.add_constant(p + "ln2.gamma", 1, width, 1.0);
    s.add_zeros(p + "ln2.beta", 1, width);
    s.add_normal(p + "mlp.fc1.weight", width, mlp_ratio * width, std_in, rng);
    s.add_zeros(p + "mlp.fc1.bias", 1, mlp_ratio * width);
    s.add_normal(p + "mlp.fc2.weight", mlp_ratio * width, width, std_out / std::sqrt(double(mlp_ratio)), rng);
    s.add_zeros(p + "mlp.fc2.bias", 1, width);
}

std::string vision_prefix(Modality m) { return "vision." + std::string(to_string(m)) + "."; }

}  // namespace

std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::Baseline: return "baseline";
        case Variant::ParallelText: return "parallel_text";
        case Variant::Imfe: return "imfe";
        case Variant::Idea: return "idea";
    }
    return "idea";
}

Variant variant_from_string(std::string_view s) {
    if (s == "baseline") return Variant::Baseline;
    if (s == "parallel_text") return Variant::ParallelText;
    if (s == "imfe") return Variant::Imfe;
    if (s == "idea") return Variant::Idea;
    throw ConfigError("unknown variant: " + std::string(s));
}

CdaConfig ModelConfig::cda_config() const {
    CdaConfig c;
    c.map_height = grid_height();
    c.map_width = grid_width();
    c.channels = embed_dim;
    c.kernel_h = mixer_kernel_h > 0 ? mixer_kernel_h : std::max(grid_height() / 2, 1);
    c.kernel_w = mixer_kernel_w > 0 ? mixer_kernel_w : std::max(grid_width() / 2, 1);
    c.offset_scale = offset_scale;
    c.heads = cda_heads;
    c.mixer_bias = mixer_bias;
    return c;
}

void ModelConfig::validate() const {
    if (patch_size < 1 || image_height % patch_size != 0 || image_width % patch_size != 0)
        throw ConfigError("model: image size must be divisible by the patch size");
    if (text_width < 1 || vision_width < 1 || embed_dim < 1 || heads < 1 || mlp_ratio < 1)
        throw ConfigError("model: widths must be >= 1");
    if (text_depth < 0 || vision_depth < 0) throw ConfigError("model: depths must be >= 0");
    if (text_width % heads != 0 || vision_width % heads != 0) throw ConfigError("model: widths must be divisible by heads");
    if (num_prompts < 0) throw ConfigError("model: N_p must be >= 0");
    if (!(offset_scale > 0)) throw ConfigError("model: k must be > 0");
    if (!(inverse_dropout >= 0.0 && inverse_dropout < 1.0)) throw ConfigError("model: dropout must lie in [0, 1)");
    if (context_length < 2) throw ConfigError("model: context length must be >= 2");
    cda_config().validate();
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"image_height", c.image_height},   {"image_width", c.image_width},
                       {"patch_size", c.patch_size},       {"text_width", c.text_width},
                       {"vision_width", c.vision_width},   {"embed_dim", c.embed_dim},
                       {"text_depth", c.text_depth},       {"vision_depth", c.vision_depth},
                       {"heads", c.heads},                 {"mlp_ratio", c.mlp_ratio},
                       {"context_length", c.context_length}, {"num_prompts", c.num_prompts},
                       {"inverse_hidden", c.inverse_hidden}, {"inverse_dropout", c.inverse_dropout},
                       {"freeze_text", c.freeze_text},     {"strict_context", c.strict_context},
                       {"mixer_kernel_h", c.mixer_kernel_h}, {"mixer_kernel_w", c.mixer_kernel_w},
                       {"offset_scale", c.offset_scale},   {"cda_heads", c.cda_heads},
                       {"mixer_bias", c.mixer_bias},       {"subject", to_string(c.subject)}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.image_height = j.value("image_height", d.image_height);
    c.image_width = j.value("image_width", d.image_width);
    c.patch_size = j.value("patch_size", d.patch_size);
    c.text_width = j.value("text_width", d.text_width);
    c.vision_width = j.value("vision_width", d.vision_width);
    c.embed_dim = j.value("embed_dim", d.embed_dim);
    c.text_depth = j.value("text_depth", d.text_depth);
    c.vision_depth = j.value("vision_depth", d.vision_depth);
    c.heads = j.value("heads", d.heads);
    c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
    c.context_length = j.value("context_length", d.context_length);
    c.num_prompts = j.value("num_prompts", d.num_prompts);
    c.inverse_hidden = j.value("inverse_hidden", d.inverse_hidden);
    c.inverse_dropout = j.value("inverse_dropout", d.inverse_dropout);
    c.freeze_text = j.value("freeze_text", d.freeze_text);
    c.strict_context = j.value("strict_context", d.strict_context);
    c.mixer_kernel_h = j.value("mixer_kernel_h", d.mixer_kernel_h);
    c.mixer_kernel_w = j.value("mixer_kernel_w", d.mixer_kernel_w);
    c.offset_scale = j.value("offset_scale", d.offset_scale);
    c.cda_heads = j.value("cda_heads", d.cda_heads);
    c.mixer_bias = j.value("mixer_bias", d.mixer_bias);
    c.subject = subject_kind_from_string(j.value("subject", std::string("person")));
}

IdeaModel::IdeaModel(const ModelConfig& cfg, Variant variant, std::uint64_t seed)
    : cfg_(cfg), variant_(variant), store_(std::make_unique<ParameterStore>()) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    ParameterStore& s = *store_;
    const int ct = cfg_.text_width, cv = cfg_.vision_width, c = cfg_.embed_dim;

    if (uses_text()) {
        s.add_normal("text.token_embedding", default_tokenizer().vocab_size(), ct, 0.02, rng);
        s.add_normal("text.positional", cfg_.context_length, ct, 0.01, rng);
        for (int i = 0; i < cfg_.text_depth; ++i) add_block(s, block_name("text.", i), ct, cfg_.mlp_ratio, cfg_.text_depth, rng);
        s.add_constant("text.ln_final.gamma", 1, ct, 1.0);
        s.add_zeros("text.ln_final.beta", 1, ct);
        if (cfg_.num_prompts > 0)
            for (Modality m : kModalities) s.add_normal("prompt." + std::string(to_string(m)), cfg_.num_prompts, ct, 0.02, rng);
    }
    if (uses_pseudo_token()) {
        const int hid = cfg_.inverse_hidden_dim();
        s.add_normal("inverse.fc1.weight", ct, hid, 1.0 / std::sqrt(double(ct)), rng);
        s.add_zeros("inverse.fc1.bias", 1, hid);
        s.add_normal("inverse.fc2.weight", hid, cv, 1.0 / std::sqrt(double(hid)), rng);
        s.add_zeros("inverse.fc2.bias", 1, cv);
    }
    if (variant_ == Variant::ParallelText) s.add_normal("text_proj.weight", ct, c, 1.0 / std::sqrt(double(ct)), rng);

    const int patch_dim = cfg_.patch_size * cfg_.patch_size * 3;
    for (Modality m : kModalities) {
        const std::string p = vision_prefix(m);
        s.add_normal(p + "patch.weight", patch_dim, cv, 1.0 / std::sqrt(double(patch_dim)), rng);
        s.add_zeros(p + "patch.bias", 1, cv);
        s.add_normal(p + "class", 1, cv, 0.02, rng);
        s.add_normal(p + "positional", cfg_.num_patches() + 2, cv, 0.02, rng);
        for (int i = 0; i < cfg_.vision_depth; ++i) add_block(s, block_name(p, i), cv, cfg_.mlp_ratio, cfg_.vision_depth, rng);
        s.add_normal(p + "proj.weight", cv, c, 1.0 / std::sqrt(double(cv)), rng);
    }
    if (variant_ == Variant::Idea) cda_ = std::make_unique<DeformableAggregation>(s, cfg_.cda_config(), rng, "cda.");
    if (cfg_.freeze_text) set_trainable("text.", false);
}

int IdeaModel::num_loss_features() const {
    switch (variant_) {
        case Variant::Baseline: return 1;
        case Variant::ParallelText:
        case Variant::Imfe: return 2;
        case Variant::Idea: return 4;
    }
    return 1;
}

int IdeaModel::retrieval_dim() const { return (variant_ == Variant::ParallelText ? 6 : 3) * cfg_.embed_dim; }

void IdeaModel::set_trainable(const std::string& prefix, bool trainable) {
    for (auto& [name, p] : store_->items())
        if (name.rfind(prefix, 0) == 0) p.trainable = trainable;
}

template <typename Scalar>
ad::Var<Scalar> IdeaModel::transformer(ad::Tape<Scalar>& tape, const std::string& prefix, int depth, ad::Var<Scalar> x,
                                       const std::vector<Eigen::Index>& lens, bool causal) const {
    const Eigen::Index w = x.cols();
    for (int i = 0; i < depth; ++i) {
        const std::string b = block_name(prefix, i);
        auto p = [&](const std::string& n) { return tape.param(store_->at(b + n)); };
        auto h = ad::layer_norm(x, p("ln1.gamma"), p("ln1.beta"));
        auto qkv = ad::linear(h, p("attn.qkv.weight"), p("attn.qkv.bias"));
        auto att = ad::attention(ad::slice_cols(qkv, 0, w), ad::slice_cols(qkv, w, w), ad::slice_cols(qkv, 2 * w, w), cfg_.heads,
                                 lens, lens, causal);
        x = ad::add(x, ad::linear(att, p("attn.out.weight"), p("attn.out.bias")));
        h = ad::layer_norm(x, p("ln2.gamma"), p("ln2.beta"));
        h = ad::gelu(ad::linear(h, p("mlp.fc1.weight"), p("mlp.fc1.bias")));
        x = ad::add(x, ad::linear(h, p("mlp.fc2.weight"), p("mlp.fc2.bias")));
    }
    return x;
}

template <typename Scalar>
ad::Var<Scalar> IdeaModel::text_features(ad::Tape<Scalar>& tape, std::span<const TextSequence* const> seqs) const {
    if (!uses_text()) throw ConfigError("text_features: variant has no text encoder");
    const int vocab = default_tokenizer().vocab_size();
    const int np = cfg_.num_prompts;
    std::vector<Eigen::Index> rows, positions, lens;
    std::vector<std::vector<Eigen::Index>> pool_groups;
    Eigen::Index offset = 0;
    for (const TextSequence* seq : seqs) {
        if (seq->length() > cfg_.context_length) throw SequenceTooLong("sequence longer than the context length");
        if (static_cast<int>(seq->prompt_positions.size()) != np)
            throw ShapeMismatch("sequence has " + std::to_string(seq->prompt_positions.size()) + " prompt slots, model expects " +
                                std::to_string(np));
        std::vector<Eigen::Index> group{offset + seq->end_position};
        for (int t = 0; t < seq->length(); ++t) rows.push_back(seq->token_ids[static_cast<std::size_t>(t)]);
        for (int i = 0; i < np; ++i) {
            const int pos = seq->prompt_positions[static_cast<std::size_t>(i)];
            rows[static_cast<std::size_t>(offset + pos)] = vocab + static_cast<int>(index_of(seq->modality)) * np + i;
            group.push_back(offset + pos);
        }
        for (int t = 0; t < seq->length(); ++t) positions.push_back(t);
        lens.push_back(seq->length());
        pool_groups.push_back(std::move(group));
        offset += seq->length();
    }
    std::vector<ad::Var<Scalar>> tables{tape.param(store_->at("text.token_embedding"))};
    if (np > 0)
        for (Modality m : kModalities) tables.push_back(tape.param(store_->at("prompt." + std::string(to_string(m)))));
    auto x = ad::gather_rows(ad::concat_rows(tables), std::move(rows));
    x = ad::add(x, ad::gather_rows(tape.param(store_->at("text.positional")), std::move(positions)));
    x = transformer(tape, "text.", cfg_.text_depth, x, lens, true);
    x = ad::layer_norm(x, tape.param(store_->at("text.ln_final.gamma")), tape.param(store_->at("text.ln_final.beta")));
    return ad::mean_rows(x, std::move(pool_groups));
}

template <typename Scalar>
ad::Var<Scalar> IdeaModel::inverse_net(ad::Tape<Scalar>& tape, const ad::Var<Scalar>& pooled,
                                       std::array<MatrixX<Scalar>, 2>* masks) const {
    auto p = [&](const std::string& n) { return tape.param(store_->at("inverse." + n)); };
    auto h = ad::gelu(ad::linear(pooled, p("fc1.weight"), p("fc1.bias")));
    h = ad::dropout(h, cfg_.inverse_dropout, masks ? &(*masks)[0] : nullptr);
    h = ad::linear(h, p("fc2.weight"), p("fc2.bias"));
    return ad::dropout(h, cfg_.inverse_dropout, masks ? &(*masks)[1] : nullptr);
}

template <typename Scalar>
ad::Var<Scalar> IdeaModel::vision_features(ad::Tape<Scalar>& tape, Modality m, std::span<const Eigen::MatrixXf* const> patches,
                                           const ad::Var<Scalar>& pseudo) const {
    const std::string pre = vision_prefix(m);
    const Eigen::Index nl = cfg_.num_patches();
    const Eigen::Index pd = static_cast<Eigen::Index>(cfg_.patch_size) * cfg_.patch_size * 3;
    const auto batch = static_cast<Eigen::Index>(patches.size());
    if (pseudo.rows() != batch || pseudo.cols() != cfg_.vision_width) throw ShapeMismatch("vision_features: pseudo token shape");
    MatrixX<Scalar> stacked(batch * nl, pd);
    for (Eigen::Index b = 0; b < batch; ++b) {
        const Eigen::MatrixXf& pm = *patches[static_cast<std::size_t>(b)];
        if (pm.rows() != nl || pm.cols() != pd)
            throw ShapeMismatch("vision_features: expected " + std::to_string(nl) + "x" + std::to_string(pd) + " patches");
        stacked.middleRows(b * nl, nl) = pm.cast<Scalar>();
    }
    auto p = [&](const std::string& n) { return tape.param(store_->at(pre + n)); };
    auto embedded = ad::linear(tape.constant(std::move(stacked)), p("patch.weight"), p("patch.bias"));
    // per sample: [pseudo, patches, class]
    const Eigen::Index len = nl + 2;
    std::vector<Eigen::Index> order, pos;
    order.reserve(static_cast<std::size_t>(batch * len));
    for (Eigen::Index b = 0; b < batch; ++b) {
        order.push_back(b);
        for (Eigen::Index i = 0; i < nl; ++i) order.push_back(batch + b * nl + i);
        order.push_back(batch + batch * nl);
        for (Eigen::Index i = 0; i < len; ++i) pos.push_back(i);
    }
    auto x = ad::gather_rows(ad::concat_rows<Scalar>({pseudo, embedded, p("class")}), std::move(order));
    x = ad::add(x, ad::gather_rows(p("positional"), std::move(pos)));
    x = transformer(tape, pre, cfg_.vision_depth, x, std::vector<Eigen::Index>(static_cast<std::size_t>(batch), len), false);
    return ad::linear(x, p("proj.weight"));
}

template <typename Scalar>
BatchFeatures<Scalar> IdeaModel::forward(ad::Tape<Scalar>& tape, std::span<const SampleInput> batch) const {
    BatchFeatures<Scalar> f;
    const int B = static_cast<int>(batch.size());
    f.batch = B;
    if (B == 0) throw ShapeMismatch("forward: empty batch");

    if (uses_text()) {
        // identical captions share one text pass
        std::map<std::pair<int, std::vector<int>>, Eigen::Index> unique;
        std::vector<const TextSequence*> seqs;
        PerModality<std::vector<Eigen::Index>> index;
        for (Modality m : kModalities)
            for (const SampleInput& s : batch) {
                const TextSequence* seq = s.text[index_of(m)];
                if (!seq) throw ConfigError("forward: missing caption sequence");
                if (seq->modality != m) throw ConfigError("forward: caption sequence has the wrong modality prefix");
                auto [it, inserted] = unique.try_emplace({static_cast<int>(index_of(m)), seq->token_ids},
                                                         static_cast<Eigen::Index>(seqs.size()));
                if (inserted) seqs.push_back(seq);
                index[index_of(m)].push_back(it->second);
            }
        auto pooled = text_features<Scalar>(tape, seqs);
        ad::Var<Scalar> inverted;
        if (uses_pseudo_token()) inverted = inverse_net(tape, pooled);
        for (Modality m : kModalities) {
            const std::size_t mi = index_of(m);
            f.pooled_text[mi] = ad::gather_rows(pooled, index[mi]);
            if (uses_pseudo_token()) f.pseudo[mi] = ad::gather_rows(inverted, index[mi]);
        }
    }
    for (Modality m : kModalities) {
        const std::size_t mi = index_of(m);
        if (!f.pseudo[mi].valid()) f.pseudo[mi] = tape.constant(MatrixX<Scalar>::Zero(B, cfg_.vision_width));
        std::vector<const Eigen::MatrixXf*> patches;
        for (const SampleInput& s : batch) patches.push_back(s.patches[mi]);
        f.vision[mi] = vision_features(tape, m, std::span<const Eigen::MatrixXf* const>(patches), f.pseudo[mi]);
    }

    const Eigen::Index len = cfg_.num_patches() + 2;
    std::vector<Eigen::Index> global_rows;
    for (Eigen::Index b = 0; b < B; ++b)
        for (Eigen::Index m = 0; m < 3; ++m) {
            global_rows.push_back(m * B * len + b * len + len - 1);  // class
            global_rows.push_back(m * B * len + b * len);            // pseudo
        }
    f.global = ad::gather_rows(ad::concat_rows<Scalar>({f.vision[0], f.vision[1], f.vision[2]}), std::move(global_rows));

    auto split = [B](const ad::Var<Scalar>& six, Eigen::Index first) {
        std::vector<ad::Var<Scalar>> cols;
        for (Eigen::Index m = 0; m < 3; ++m) {
            std::vector<Eigen::Index> rows;
            for (Eigen::Index b = 0; b < B; ++b) rows.push_back(b * 6 + 2 * m + first);
            cols.push_back(ad::gather_rows(six, std::move(rows)));
        }
        return ad::concat_cols(cols);
    };
    f.global_v = split(f.global, 0);
    f.global_t = split(f.global, 1);

    switch (variant_) {
        case Variant::Baseline:
            f.loss_features = {f.global_v};
            f.loss_feature_names = {"global_v"};
            f.retrieval = f.global_v;
            break;
        case Variant::ParallelText: {
            auto w = tape.param(store_->at("text_proj.weight"));
            f.text_concat = ad::concat_cols<Scalar>(
                {ad::linear(f.pooled_text[0], w), ad::linear(f.pooled_text[1], w), ad::linear(f.pooled_text[2], w)});
            f.loss_features = {f.global_v, f.text_concat};
            f.loss_feature_names = {"global_v", "text"};
            f.retrieval = ad::concat_cols<Scalar>({f.global_v, f.text_concat});
            break;
        }
        case Variant::Imfe:
            f.loss_features = {f.global_v, f.global_t};
            f.loss_feature_names = {"global_v", "global_t"};
            f.retrieval = f.global_t;
            break;
        case Variant::Idea: {
            std::array<ad::Var<Scalar>, 3> locals;
            for (std::size_t m = 0; m < 3; ++m) {
                std::vector<Eigen::Index> rows;
                for (Eigen::Index b = 0; b < B; ++b)
                    for (Eigen::Index i = 1; i <= cfg_.num_patches(); ++i) rows.push_back(b * len + i);
                locals[m] = ad::gather_rows(f.vision[m], std::move(rows));
            }
            f.cda = cda_->forward(tape, locals, f.global, B);
            f.cda_v = split(f.cda->fused, 0);
            f.cda_t = split(f.cda->fused, 1);
            f.loss_features = {f.global_v, f.global_t, f.cda_v, f.cda_t};
            f.loss_feature_names = {"global_v", "global_t", "cda_v", "cda_t"};
            f.retrieval = f.cda_t;
            break;
        }
    }
    return f;
}

Eigen::VectorXd IdeaModel::encode_text(const TextSequence& seq) const {
    ad::Tape<double> tape;
    const TextSequence* p = &seq;
    return text_features<double>(tape, std::span<const TextSequence* const>(&p, 1)).value().row(0).transpose();
}

Eigen::VectorXd IdeaModel::inverse_net(const Eigen::VectorXd& f_hat) const {
    ad::Tape<double> tape;
    return inverse_net(tape, tape.constant(f_hat.transpose())).value().row(0).transpose();
}

Eigen::MatrixXd IdeaModel::encode_vision(const Image& image, const Eigen::VectorXd& f_t, Modality m) const {
    if (image.height != cfg_.image_height || image.width != cfg_.image_width)
        throw ShapeMismatch("encode_vision: image is " + std::to_string(image.height) + "x" + std::to_string(image.width));
    if (f_t.size() != cfg_.vision_width) throw ShapeMismatch("encode_vision: pseudo token width");
    const Eigen::MatrixXf patches = patchify(image, cfg_.patch_size);
    ad::Tape<double> tape;
    const Eigen::MatrixXf* p = &patches;
    return vision_features<double>(tape, m, std::span<const Eigen::MatrixXf* const>(&p, 1), tape.constant(f_t.transpose())).value();
}

FeatureBundle IdeaModel::features(const SampleInput& sample) const {
    ad::Tape<double> tape;
    const auto f = forward<double>(tape, std::span<const SampleInput>(&sample, 1));
    FeatureBundle out;
    for (std::size_t m = 0; m < 3; ++m) {
        if (f.pooled_text[m].valid()) out.f_hat_t[m] = f.pooled_text[m].value().row(0).transpose();
        out.f_t[m] = f.pseudo[m].value().row(0).transpose();
        out.F_m[m] = f.vision[m].value();
    }
    out.F_G = f.global.value();
    out.F_G_v = f.global_v.value().row(0).transpose();
    out.F_G_t = f.global_t.value().row(0).transpose();
    if (f.cda) {
        out.F_S = f.cda->sampled.value();
        out.F_CDA = f.cda->fused.value();
        out.F_CDA_v = f.cda_v.value().row(0).transpose();
        out.F_CDA_t = f.cda_t.value().row(0).transpose();
    }
    out.retrieval = f.retrieval.value().row(0).transpose();
    return out;
}

#define IDEA_INSTANTIATE_MODEL(S)                                                                                           \
    template ad::Var<S> IdeaModel::text_features<S>(ad::Tape<S>&, std::span<const TextSequence* const>) const;             \
    template ad::Var<S> IdeaModel::inverse_net<S>(ad::Tape<S>&, const ad::Var<S>&, std::array<MatrixX<S>, 2>*) const;      \
    template ad::Var<S> IdeaModel::vision_features<S>(ad::Tape<S>&, Modality, std::span<const Eigen::MatrixXf* const>,     \
                                                      const ad::Var<S>&) const;                                             \
    template BatchFeatures<S> IdeaModel::forward<S>(ad::Tape<S>&, std::span<const SampleInput>) const;

IDEA_INSTANTIATE_MODEL(float)
IDEA_INSTANTIATE_MODEL(double)

#undef IDEA_INSTANTIATE_MODEL

}  // namespace idea
