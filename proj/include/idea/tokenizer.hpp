// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "idea/modality.hpp"

namespace idea {

/// Fixed modal prefix sentence; "XXXX" marks where learnable tokens go.
std::string modal_prefix(Modality m, SubjectKind kind = SubjectKind::Person);

/// Token ids of one prefixed caption.
struct TextSequence {
    std::vector<int> token_ids;
    std::vector<int> prompt_positions;
    int end_position = 0;
    int max_length = 77;
    Modality modality = Modality::RGB;

    int length() const { return static_cast<int>(token_ids.size()); }
};

/// Lowercase word/punctuation tokenizer over the closed caption vocabulary.
/// Out-of-vocabulary words fall back to one token per byte.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kStart = 1;
    static constexpr int kEnd = 2;
    static constexpr int kPrompt = 3;

    Tokenizer();

    int vocab_size() const { return byte_base_ + 256; }
    std::vector<int> tokenize(std::string_view text) const;
    std::string token_string(int id) const;

    /// <sot> prefix(with N_p prompt slots) caption <eot>. When too long the
    /// caption tail is dropped; with `strict` it raises SequenceTooLong instead.
    TextSequence encode(Modality m, std::string_view caption, int num_prompts, int max_length = 77, bool strict = false,
                        SubjectKind kind = SubjectKind::Person) const;

private:
    std::map<std::string, int, std::less<>> word_ids_;
    std::vector<std::string> words_;
    int byte_base_ = 0;
};

/// Shared instance; the vocabulary is fixed at build time.
const Tokenizer& default_tokenizer();

}  // namespace idea
