// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "idea/errors.hpp"
#include "idea/modality.hpp"

namespace idea {

inline constexpr std::string_view kUnknown = "unknown";

/// Slot names in template order.
std::span<const std::string> person_slots();
std::span<const std::string> vehicle_slots();
std::span<const std::string> slots_for(SubjectKind kind);

/// Structured attributes that fill the caption template. Every slot of the
/// record's kind is always present; "unknown" is a legal value.
struct AttributeRecord {
    SubjectKind kind = SubjectKind::Person;
    std::map<std::string, std::string> fields;

    static AttributeRecord unknown(SubjectKind kind);

    const std::string& operator[](const std::string& slot) const;
    std::string& operator[](const std::string& slot);
    std::size_t unknown_count() const;
    bool fully_specified() const { return unknown_count() == 0; }

    friend bool operator==(const AttributeRecord&, const AttributeRecord&) = default;
};

void to_json(nlohmann::json& j, const AttributeRecord& r);
void from_json(const nlohmann::json& j, AttributeRecord& r);

struct Caption {
    std::string text;
    Modality modality = Modality::RGB;

    std::size_t char_length() const { return text.size(); }
};

/// Closed vocabularies used by the synthetic renderer, the tokenizer and the
/// randomized round-trip tests.
struct AttributeVocabulary {
    std::vector<std::string> colors;
    std::map<std::string, std::vector<std::string>> values;  // slot -> choices (color slots use `colors`)
};

const AttributeVocabulary& person_vocabulary();
const AttributeVocabulary& vehicle_vocabulary();
const AttributeVocabulary& vocabulary_for(SubjectKind kind);
bool is_color_slot(const std::string& slot);

enum class PromptPhase { Generate, Extract };

/// Generation: modality-specific prefix, generic template, anti-hallucination
/// instruction. Extraction: the attribute extraction instruction.
std::string build_prompt(Modality modality, SubjectKind kind, PromptPhase phase);

/// Template with {Slot} placeholders, e.g. "The {Gender} is wearing a ...".
std::string generic_template(SubjectKind kind);

Caption fill_template(const AttributeRecord& attrs, Modality modality = Modality::RGB);

/// Opaque handle passed to the MLLM alongside a prompt (a path or URI).
struct ImageRef {
    std::string uri;
};

/// A multimodal LLM endpoint. Implementations must tolerate concurrent send().
class MllmClient {
public:
    virtual ~MllmClient() = default;
    virtual std::string send(const std::string& prompt, const ImageRef& image) = 0;
};

/// Deterministic stand-in. Generation replies describe attributes supplied by
/// an oracle (default: a hash of the image ref); extraction replies re-parse
/// the embedded sentence and refill the template.
class MockMllmClient : public MllmClient {
public:
    enum class Style { Template, Verbose };
    using Oracle = std::function<AttributeRecord(const ImageRef&, SubjectKind)>;

    explicit MockMllmClient(Style style = Style::Template, Oracle oracle = {});
    std::string send(const std::string& prompt, const ImageRef& image) override;

    static AttributeRecord hashed_attributes(const ImageRef& image, SubjectKind kind);

private:
    Style style_;
    Oracle oracle_;
};

struct RetryPolicy {
    int max_retries = 3;
    std::chrono::milliseconds backoff_base{1000};
    std::function<void(std::chrono::milliseconds)> sleep;  // default: std::this_thread::sleep_for
};

/// Calls client.send, retrying ClientError with exponential backoff; the
/// last error is rethrown after max_retries attempts.
std::string send_with_retry(MllmClient& client, const std::string& prompt, const ImageRef& image, const RetryPolicy& retry);

/// Plain JSON-over-HTTP client: POST {"prompt", "image"} and read {"text"}.
/// The bearer credential comes from IDEA_MLLM_KEY.
struct HttpClientConfig {
    std::string endpoint;  // e.g. http://localhost:8080/v1/caption
    std::string credential;
    std::chrono::seconds timeout{30};
    int max_retries = 3;

    /// Endpoint from the given value, credential from the environment.
    static HttpClientConfig from_environment(std::string endpoint);
};

class HttpMllmClient : public MllmClient {
public:
    explicit HttpMllmClient(HttpClientConfig cfg);
    std::string send(const std::string& prompt, const ImageRef& image) override;

private:
    HttpClientConfig cfg_;
};

/// Separator between the extraction instruction and the sentence to parse.
inline constexpr std::string_view kExtractionSeparator = "\nSentence: ";

/// Recovers attributes from a template-shaped or paraphrased sentence. With a
/// client, the extraction prompt is sent first and the reply is parsed.
/// Throws UnparseableCaption when no slot matches.
AttributeRecord extract_attributes(std::string_view text, SubjectKind kind, MllmClient* client = nullptr,
                                   const RetryPolicy& retry = {});

/// generate → extract → refill. Unparseable descriptions become an
/// all-"unknown" caption and a logged warning.
Caption annotate_image(const ImageRef& image, Modality modality, SubjectKind kind, MllmClient& client,
                       const RetryPolicy& retry = {});

/// One caption-file record: {sample_id, modality, text, attributes{...}}.
struct CaptionRecord {
    std::string sample_id;
    Modality modality = Modality::RGB;
    std::string text;
    AttributeRecord attributes;
};

void to_json(nlohmann::json& j, const CaptionRecord& r);
void from_json(const nlohmann::json& j, CaptionRecord& r);

void write_caption_file(const std::string& path, std::span<const CaptionRecord> records);
std::vector<CaptionRecord> read_caption_file(const std::string& path);

}  // namespace idea
