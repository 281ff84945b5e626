// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/tokenizer.hpp"

#include <cctype>
#include <set>

#include "idea/captions.hpp"
#include "idea/errors.hpp"

namespace idea {
namespace {

constexpr std::string_view kPlaceholder = "XXXX";

bool is_word_char(unsigned char c) { return std::isalnum(c) || c == '-' || c == '\''; }

// Splits lowercase text into words and single punctuation marks.
std::vector<std::string> split(std::string_view text) {
    std::vector<std::string> out;
    std::string word;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (is_word_char(c)) {
            word.push_back(static_cast<char>(std::tolower(c)));
            continue;
        }
        if (!word.empty()) out.push_back(std::move(word)), word.clear();
        if (!std::isspace(c)) out.emplace_back(1, static_cast<char>(c));
    }
    if (!word.empty()) out.push_back(std::move(word));
    return out;
}

}  // namespace

std::string modal_prefix(Modality m, SubjectKind kind) {
    const std::string subject = kind == SubjectKind::Person ? "person" : "vehicle";
    switch (m) {
        case Modality::RGB:
            return "An image of a XXXX " + subject + " in the visible spectrum, capturing natural colors and fine details: ";
        case Modality::NIR:
            return "An image of a XXXX " + subject +
                   " in the near infrared spectrum, capturing contrasts and surface reflectance: ";
        case Modality::TIR:
            return "An image of a XXXX " + subject +
                   " in the thermal infrared spectrum, capturing heat emissions as temperature gradients: ";
    }
    return {};
}

Tokenizer::Tokenizer() {
    std::set<std::string> words;
    auto add_text = [&](std::string_view text) {
        for (auto& w : split(text)) words.insert(std::move(w));
    };
    for (SubjectKind kind : {SubjectKind::Person, SubjectKind::Vehicle}) {
        for (Modality m : kModalities) add_text(modal_prefix(m, kind));
        std::string tmpl = generic_template(kind);
        // drop the {Slot} placeholders, keep the connective words
        for (std::size_t b = tmpl.find('{'); b != std::string::npos; b = tmpl.find('{')) tmpl.erase(b, tmpl.find('}', b) - b + 1);
        add_text(tmpl);
        const auto& vocab = vocabulary_for(kind);
        for (const auto& c : vocab.colors) add_text(c);
        for (const auto& [slot, values] : vocab.values)
            for (const auto& v : values) add_text(v);
    }
    add_text("unknown light dark a an the , . : ; ! ?");
    words.erase("xxxx");
    words_.assign(words.begin(), words.end());
    for (std::size_t i = 0; i < words_.size(); ++i) word_ids_.emplace(words_[i], 4 + static_cast<int>(i));
    byte_base_ = 4 + static_cast<int>(words_.size());
}

std::vector<int> Tokenizer::tokenize(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& w : split(text)) {
        if (auto it = word_ids_.find(w); it != word_ids_.end()) {
            ids.push_back(it->second);
            continue;
        }
        for (unsigned char c : w) ids.push_back(byte_base_ + c);
    }
    return ids;
}

std::string Tokenizer::token_string(int id) const {
    switch (id) {
        case kPad: return "<pad>";
        case kStart: return "<sot>";
        case kEnd: return "<eot>";
        case kPrompt: return "<prompt>";
        default: break;
    }
    if (id >= 4 && id < byte_base_) return words_[static_cast<std::size_t>(id - 4)];
    if (id >= byte_base_ && id < vocab_size()) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "<0x%02X>", id - byte_base_);
        return buf;
    }
    throw std::out_of_range("token id out of range: " + std::to_string(id));
}

TextSequence Tokenizer::encode(Modality m, std::string_view caption, int num_prompts, int max_length, bool strict,
                               SubjectKind kind) const {
    if (num_prompts < 0) throw ConfigError("number of prompt tokens must be >= 0");
    const std::string prefix = modal_prefix(m, kind);
    const auto at = prefix.find(kPlaceholder);
    TextSequence seq;
    seq.max_length = max_length;
    seq.modality = m;
    seq.token_ids.push_back(kStart);
    for (int id : tokenize(std::string_view(prefix).substr(0, at))) seq.token_ids.push_back(id);
    for (int i = 0; i < num_prompts; ++i) {
        seq.prompt_positions.push_back(seq.length());
        seq.token_ids.push_back(kPrompt);
    }
    for (int id : tokenize(std::string_view(prefix).substr(at + kPlaceholder.size()))) seq.token_ids.push_back(id);
    if (seq.length() + 1 > max_length)
        throw SequenceTooLong("prefix alone needs " + std::to_string(seq.length() + 1) + " tokens, context is " +
                              std::to_string(max_length));
    const auto body = tokenize(caption);
    const std::size_t room = static_cast<std::size_t>(max_length - seq.length() - 1);
    if (body.size() > room && strict)
        throw SequenceTooLong("caption needs " + std::to_string(seq.length() + body.size() + 1) + " tokens, context is " +
                              std::to_string(max_length));
    for (std::size_t i = 0; i < std::min(room, body.size()); ++i) seq.token_ids.push_back(body[i]);
    seq.end_position = seq.length();
    seq.token_ids.push_back(kEnd);
    return seq;
}

const Tokenizer& default_tokenizer() {
    static const Tokenizer t;
    return t;
}

}  // namespace idea
