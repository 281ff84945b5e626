// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/captions.hpp"

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include "idea/log.hpp"

namespace idea {
namespace {

const std::vector<std::string> kPersonSlots{"gender",    "upper_color", "upper_garment", "lower_color",
                                            "lower_garment", "shoe_color", "shoes",        "hairstyle",
                                            "hair_color", "age_group",  "belongings"};
const std::vector<std::string> kVehicleSlots{"vehicle_type", "color", "plate", "logo", "window_sticker", "roof_rack"};

const std::set<std::string> kColorSlots{"upper_color", "lower_color", "shoe_color", "hair_color", "color"};

// Wording of the generation and extraction prompts.
constexpr std::string_view kPersonPrefix =
    "Write a comprehensive description of the person's overall appearance based on the {MODALITY} image, strictly "
    "following this template. Include the following attributes: 'upper garment', 'lower garment', 'shoes', "
    "'hairstyle', 'gender', 'age group' and 'belongings'. Use specific details, including color, patterns and texture "
    "details. Please follow this structure: ";
constexpr std::string_view kVehiclePrefix =
    "Write a comprehensive description of the vehicle's overall appearance based on the {MODALITY} image, strictly "
    "following this template. Include the following attributes: 'vehicle type', 'color', 'license plate', 'logo', "
    "'window sticker' and 'roof rack'. Use specific details, including color, patterns and texture details. Please "
    "follow this structure: ";
constexpr std::string_view kPersonTemplate =
    "The {Gender} is wearing a {Upper_Color} {Upper_Garment} with {Lower_Color} {Lower_Garment} and {Shoe_Color} "
    "{Shoes}. The {Gender} has {Hairstyle} {Hair_Color} hair and appears to be {Age_Group}. The {Gender} is carrying "
    "{Belongings}.";
constexpr std::string_view kVehicleTemplate =
    "The vehicle is a {Color} {Vehicle_Type} with license plate {Plate} and {Logo} logo. The vehicle has "
    "{Window_Sticker} window sticker and {Roof_Rack} roof rack.";
constexpr std::string_view kAntiHallucination =
    "If certain attributes are not visible, ignore them. Do not imagine contents not present in the image. Adhere "
    "strictly to the format without adding extra explanations.";
constexpr std::string_view kExtractHead =
    "Extract the key attributes from the sentence I give you and fill them into the following template: ";
constexpr std::string_view kExtractTail = " Strictly follow the template, do not add any extra information.";

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
    for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
        s.replace(pos, from.size(), to);
    return s;
}

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n,;:");
    auto e = s.find_last_not_of(" \t\r\n,;:");
    if (b == std::string_view::npos) return {};
    return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return char(std::tolower(c)); });
    return s;
}

std::string strip_article(std::string s) {
    for (std::string_view art : {"a ", "an ", "the "}) {
        if (s.size() > art.size() && lower(s.substr(0, art.size())) == art) return s.substr(art.size());
    }
    return s;
}

std::vector<std::string> split_words(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> words;
    for (std::string w; in >> w;) words.push_back(w);
    return words;
}

std::string join(const std::vector<std::string>& words, std::size_t from, std::size_t to) {
    std::string out;
    for (std::size_t i = from; i < to; ++i) {
        if (!out.empty()) out += ' ';
        out += words[i];
    }
    return out;
}

bool is_color_phrase(const std::string& phrase, const AttributeVocabulary& vocab) {
    const std::string l = lower(phrase);
    if (l == kUnknown) return true;
    return std::any_of(vocab.colors.begin(), vocab.colors.end(), [&](const std::string& c) { return lower(c) == l; });
}

/// "dark blue denim jacket" -> {"dark blue", "denim jacket"}: longest color prefix.
std::pair<std::string, std::string> split_color_prefix(const std::string& phrase, const AttributeVocabulary& vocab) {
    const auto words = split_words(phrase);
    if (words.empty()) return {std::string(kUnknown), std::string(kUnknown)};
    for (std::size_t n = std::min<std::size_t>(words.size() - 1, 3); n >= 1; --n) {
        const std::string head = join(words, 0, n);
        if (is_color_phrase(head, vocab)) return {head, join(words, n, words.size())};
    }
    if (words.size() == 1) return {std::string(kUnknown), words[0]};
    return {words[0], join(words, 1, words.size())};
}

/// "short dark brown" -> {"short", "dark brown"}: longest color suffix.
std::pair<std::string, std::string> split_color_suffix(const std::string& phrase, const AttributeVocabulary& vocab) {
    const auto words = split_words(phrase);
    if (words.empty()) return {std::string(kUnknown), std::string(kUnknown)};
    for (std::size_t n = std::min<std::size_t>(words.size() - 1, 3); n >= 1; --n) {
        const std::string tail = join(words, words.size() - n, words.size());
        if (is_color_phrase(tail, vocab)) return {join(words, 0, words.size() - n), tail};
    }
    if (words.size() == 1) return {words[0], std::string(kUnknown)};
    return {join(words, 0, words.size() - 1), words.back()};
}

std::optional<std::string> search(const std::string& text, const std::regex& re, std::size_t group = 1) {
    std::smatch m;
    if (!std::regex_search(text, m, re)) return std::nullopt;
    std::string v = trim(m[group].str());
    if (v.empty()) return std::nullopt;
    return v;
}

constexpr auto kRegexFlags = std::regex::ECMAScript | std::regex::icase;

AttributeRecord parse_person(const std::string& text) {
    static const std::regex gender_re(R"(\b(?:the|a|an)\s+([A-Za-z-]+)\s+(?:is|has|appears)\b)", kRegexFlags);
    static const std::regex wearing_re(R"(\bwearing\s+(?:an?\s+)?(.+?)\s*(?:\bwith\b|,)\s*(.+?)\s+and\s+(.+?)\s*(?:[.,;]|$))",
                                       kRegexFlags);
    static const std::regex hair_re(R"(\bhas\s+(.+?)\s+hair\b)", kRegexFlags);
    static const std::regex age_re(R"(\bappears\s+to\s+be\s+(.+?)\s*(?:[.,;]|$))", kRegexFlags);
    static const std::regex carrying_re(R"(\bcarrying\s+(.+?)\s*(?:[.;]|$))", kRegexFlags);

    const auto& vocab = person_vocabulary();
    AttributeRecord rec = AttributeRecord::unknown(SubjectKind::Person);
    std::size_t matched = 0;
    if (auto g = search(text, gender_re)) {
        rec["gender"] = *g;
        ++matched;
    }
    std::smatch m;
    if (std::regex_search(text, m, wearing_re)) {
        std::tie(rec["upper_color"], rec["upper_garment"]) = split_color_prefix(trim(m[1].str()), vocab);
        std::tie(rec["lower_color"], rec["lower_garment"]) = split_color_prefix(trim(m[2].str()), vocab);
        std::tie(rec["shoe_color"], rec["shoes"]) = split_color_prefix(trim(m[3].str()), vocab);
        ++matched;
    }
    if (auto h = search(text, hair_re)) {
        std::tie(rec["hairstyle"], rec["hair_color"]) = split_color_suffix(*h, vocab);
        ++matched;
    }
    if (auto a = search(text, age_re)) {
        rec["age_group"] = strip_article(*a);
        ++matched;
    }
    if (auto c = search(text, carrying_re)) {
        rec["belongings"] = strip_article(*c);
        ++matched;
    }
    if (matched == 0) throw UnparseableCaption("no attribute clause found in: \"" + text + "\"");
    return rec;
}

AttributeRecord parse_vehicle(const std::string& text) {
    static const std::regex type_re(R"(\bis\s+an?\s+(.+?)\s+with\b)", kRegexFlags);
    static const std::regex plate_re(R"(\blicense\s+plate\s+([A-Za-z0-9-]+))", kRegexFlags);
    static const std::regex logo_re(R"(\blicense\s+plate\s+\S+\s+and\s+(?:an?\s+)?(.+?)\s+logo\b)", kRegexFlags);
    static const std::regex logo_fallback_re(R"(\b([A-Za-z0-9-]+)\s+logo\b)", kRegexFlags);
    static const std::regex sticker_re(R"(\bhas\s+(?:an?\s+)?(.+?)\s+window\s+sticker\b)", kRegexFlags);
    static const std::regex rack_re(R"(\bwindow\s+sticker\s+and\s+(?:an?\s+)?(.+?)\s+roof\s+rack\b)", kRegexFlags);
    static const std::regex rack_fallback_re(R"(\b([A-Za-z0-9-]+)\s+roof\s+rack\b)", kRegexFlags);

    const auto& vocab = vehicle_vocabulary();
    AttributeRecord rec = AttributeRecord::unknown(SubjectKind::Vehicle);
    std::size_t matched = 0;
    if (auto t = search(text, type_re)) {
        std::tie(rec["color"], rec["vehicle_type"]) = split_color_prefix(*t, vocab);
        ++matched;
    }
    if (auto p = search(text, plate_re)) {
        rec["plate"] = *p;
        ++matched;
    }
    if (auto l = search(text, logo_re)) {
        rec["logo"] = *l;
        ++matched;
    } else if (auto lf = search(text, logo_fallback_re)) {
        rec["logo"] = *lf;
        ++matched;
    }
    if (auto s = search(text, sticker_re)) {
        rec["window_sticker"] = *s;
        ++matched;
    }
    if (auto r = search(text, rack_re)) {
        rec["roof_rack"] = *r;
        ++matched;
    } else if (auto rf = search(text, rack_fallback_re)) {
        rec["roof_rack"] = *rf;
        ++matched;
    }
    if (matched == 0) throw UnparseableCaption("no attribute clause found in: \"" + text + "\"");
    return rec;
}

AttributeRecord parse_attributes(std::string_view text, SubjectKind kind) {
    const std::string s = trim(text);
    if (s.empty()) throw UnparseableCaption("empty caption");
    return kind == SubjectKind::Person ? parse_person(s) : parse_vehicle(s);
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string verbose_description(const AttributeRecord& a, Modality modality, std::uint64_t variant) {
    const std::string body = fill_template(a, modality).text;
    const std::string mod(to_string(modality));
    switch (variant % 3) {
        case 0:
            return "This " + mod + " image shows a subject captured by a surveillance camera. " + body +
                   " The background is an outdoor street scene, and the lighting is moderate.";
        case 1:
            return "Here is the description you asked for. " + body +
                   " Some fine details are hard to confirm because of the image resolution. No other objects stand out.";
        default:
            return "Looking at the " + mod + " frame carefully: " + body +
                   "\nOverall the appearance is consistent throughout the sequence.";
    }
}

}  // namespace

std::span<const std::string> person_slots() { return kPersonSlots; }
std::span<const std::string> vehicle_slots() { return kVehicleSlots; }
std::span<const std::string> slots_for(SubjectKind kind) {
    return kind == SubjectKind::Person ? person_slots() : vehicle_slots();
}

bool is_color_slot(const std::string& slot) { return kColorSlots.count(slot) != 0; }

AttributeRecord AttributeRecord::unknown(SubjectKind kind) {
    AttributeRecord r;
    r.kind = kind;
    for (const auto& s : slots_for(kind)) r.fields[s] = std::string(kUnknown);
    return r;
}

const std::string& AttributeRecord::operator[](const std::string& slot) const {
    auto it = fields.find(slot);
    if (it == fields.end()) throw std::out_of_range("attribute slot not present: " + slot);
    return it->second;
}

std::string& AttributeRecord::operator[](const std::string& slot) {
    auto it = fields.find(slot);
    if (it == fields.end()) throw std::out_of_range("attribute slot not present: " + slot);
    return it->second;
}

std::size_t AttributeRecord::unknown_count() const {
    return static_cast<std::size_t>(std::count_if(fields.begin(), fields.end(), [](const auto& kv) { return kv.second == kUnknown; }));
}

void to_json(nlohmann::json& j, const AttributeRecord& r) {
    j = nlohmann::json::object();
    j["kind"] = std::string(to_string(r.kind));
    for (const auto& [k, v] : r.fields) j[k] = v;
}

void from_json(const nlohmann::json& j, AttributeRecord& r) {
    r = AttributeRecord::unknown(subject_kind_from_string(j.at("kind").get<std::string>()));
    for (const auto& s : slots_for(r.kind))
        if (j.contains(s)) r.fields[s] = j.at(s).get<std::string>();
}

const AttributeVocabulary& person_vocabulary() {
    static const AttributeVocabulary v{
        {"white", "black", "gray", "red", "blue", "green", "yellow", "brown", "pink", "purple", "orange", "beige",
         "dark blue", "light blue", "dark", "light"},
        {{"gender", {"man", "woman", "boy", "girl"}},
         {"upper_garment", {"t-shirt", "shirt", "jacket", "coat", "sweater", "hoodie", "vest", "denim jacket"}},
         {"lower_garment", {"jeans", "trousers", "shorts", "skirt", "leggings"}},
         {"shoes", {"sneakers", "boots", "sandals", "shoes", "slippers"}},
         {"hairstyle", {"short", "long", "curly", "shoulder-length", "tied-back"}},
         {"age_group", {"child", "teenager", "young adult", "middle-aged", "elderly"}},
         {"belongings", {"backpack", "black backpack", "purse", "handbag", "shoulder bag", "umbrella", "suitcase",
                         "shopping bag", "nothing"}}}};
    return v;
}

const AttributeVocabulary& vehicle_vocabulary() {
    static const AttributeVocabulary v{
        {"white", "black", "silver", "gray", "red", "blue", "green", "yellow", "brown", "orange", "dark blue"},
        {{"vehicle_type", {"sedan", "suv", "hatchback", "pickup truck", "van", "bus", "taxi", "minivan"}},
         {"plate", {"KQQ819", "AB1234", "ZX5521", "MN0047", "TT9910", "JL3086"}},
         {"logo", {"Hyundai", "Toyota", "Honda", "Ford", "Volkswagen", "BMW", "Nissan", "Kia"}},
         {"window_sticker", {"no", "yellow", "inspection", "parking", "blue"}},
         {"roof_rack", {"no", "black", "silver"}}}};
    return v;
}

const AttributeVocabulary& vocabulary_for(SubjectKind kind) {
    return kind == SubjectKind::Person ? person_vocabulary() : vehicle_vocabulary();
}

std::string generic_template(SubjectKind kind) {
    return std::string(kind == SubjectKind::Person ? kPersonTemplate : kVehicleTemplate);
}

std::string build_prompt(Modality modality, SubjectKind kind, PromptPhase phase) {
    const std::string tmpl = generic_template(kind);
    if (phase == PromptPhase::Extract) return std::string(kExtractHead) + tmpl + std::string(kExtractTail);
    const std::string prefix =
        replace_all(std::string(kind == SubjectKind::Person ? kPersonPrefix : kVehiclePrefix), "{MODALITY}", to_string(modality));
    return prefix + tmpl + " " + std::string(kAntiHallucination);
}

Caption fill_template(const AttributeRecord& a, Modality modality) {
    std::string text = generic_template(a.kind);
    if (a.kind == SubjectKind::Person) {
        text = replace_all(text, "{Gender}", a["gender"]);
        text = replace_all(text, "{Upper_Color}", a["upper_color"]);
        text = replace_all(text, "{Upper_Garment}", a["upper_garment"]);
        text = replace_all(text, "{Lower_Color}", a["lower_color"]);
        text = replace_all(text, "{Lower_Garment}", a["lower_garment"]);
        text = replace_all(text, "{Shoe_Color}", a["shoe_color"]);
        text = replace_all(text, "{Shoes}", a["shoes"]);
        text = replace_all(text, "{Hairstyle}", a["hairstyle"]);
        text = replace_all(text, "{Hair_Color}", a["hair_color"]);
        text = replace_all(text, "{Age_Group}", a["age_group"]);
        text = replace_all(text, "{Belongings}", a["belongings"]);
    } else {
        text = replace_all(text, "{Color}", a["color"]);
        text = replace_all(text, "{Vehicle_Type}", a["vehicle_type"]);
        text = replace_all(text, "{Plate}", a["plate"]);
        text = replace_all(text, "{Logo}", a["logo"]);
        text = replace_all(text, "{Window_Sticker}", a["window_sticker"]);
        text = replace_all(text, "{Roof_Rack}", a["roof_rack"]);
    }
    return Caption{std::move(text), modality};
}

MockMllmClient::MockMllmClient(Style style, Oracle oracle) : style_(style), oracle_(std::move(oracle)) {}

AttributeRecord MockMllmClient::hashed_attributes(const ImageRef& image, SubjectKind kind) {
    const auto& vocab = vocabulary_for(kind);
    AttributeRecord rec = AttributeRecord::unknown(kind);
    for (const auto& slot : slots_for(kind)) {
        const auto& choices = is_color_slot(slot) ? vocab.colors : vocab.values.at(slot);
        rec[slot] = choices[fnv1a(image.uri + "#" + slot) % choices.size()];
    }
    return rec;
}

std::string MockMllmClient::send(const std::string& prompt, const ImageRef& image) {
    if (prompt.rfind(kExtractHead, 0) == 0) {
        const auto sep = prompt.find(kExtractionSeparator);
        const std::string sentence = sep == std::string::npos ? std::string() : prompt.substr(sep + kExtractionSeparator.size());
        const SubjectKind kind = prompt.find("{Gender}") != std::string::npos ? SubjectKind::Person : SubjectKind::Vehicle;
        try {
            return fill_template(parse_attributes(sentence, kind)).text;
        } catch (const UnparseableCaption&) {
            return "I could not identify any attributes in the given sentence.";
        }
    }
    const SubjectKind kind = prompt.find("the vehicle's") != std::string::npos ? SubjectKind::Vehicle : SubjectKind::Person;
    Modality modality = Modality::RGB;
    for (Modality m : kModalities)
        if (prompt.find("based on the " + std::string(to_string(m)) + " image") != std::string::npos) modality = m;
    const AttributeRecord attrs = oracle_ ? oracle_(image, kind) : hashed_attributes(image, kind);
    if (style_ == Style::Template) return fill_template(attrs, modality).text;
    return verbose_description(attrs, modality, fnv1a(image.uri));
}

std::string send_with_retry(MllmClient& client, const std::string& prompt, const ImageRef& image, const RetryPolicy& retry) {
    const int attempts = std::max(retry.max_retries, 1);
    for (int attempt = 1;; ++attempt) {
        try {
            return client.send(prompt, image);
        } catch (const ClientError& e) {
            if (attempt >= attempts) throw;
            const auto delay = retry.backoff_base * (1 << (attempt - 1));
            log_warning("MLLM request failed (attempt " + std::to_string(attempt) + "/" + std::to_string(attempts) +
                        "): " + e.what());
            if (retry.sleep) {
                retry.sleep(delay);
            } else {
                std::this_thread::sleep_for(delay);
            }
        }
    }
}

AttributeRecord extract_attributes(std::string_view text, SubjectKind kind, MllmClient* client, const RetryPolicy& retry) {
    if (trim(text).empty()) throw UnparseableCaption("empty caption");
    if (client != nullptr) {
        const std::string prompt =
            build_prompt(Modality::RGB, kind, PromptPhase::Extract) + std::string(kExtractionSeparator) + std::string(text);
        const std::string reply = send_with_retry(*client, prompt, ImageRef{}, retry);
        try {
            return parse_attributes(reply, kind);
        } catch (const UnparseableCaption&) {
            log_warning("extraction reply unparseable, falling back to the pattern parser on the original text");
        }
    }
    return parse_attributes(text, kind);
}

Caption annotate_image(const ImageRef& image, Modality modality, SubjectKind kind, MllmClient& client, const RetryPolicy& retry) {
    const std::string description =
        send_with_retry(client, build_prompt(modality, kind, PromptPhase::Generate), image, retry);
    AttributeRecord attrs;
    try {
        attrs = extract_attributes(description, kind, &client, retry);
    } catch (const UnparseableCaption& e) {
        log_warning("unparseable description for " + image.uri + ": " + e.what());
        attrs = AttributeRecord::unknown(kind);
    }
    return fill_template(attrs, modality);
}

void to_json(nlohmann::json& j, const CaptionRecord& r) {
    j = nlohmann::json{{"sample_id", r.sample_id},
                       {"modality", std::string(to_string(r.modality))},
                       {"text", r.text},
                       {"attributes", r.attributes}};
}

void from_json(const nlohmann::json& j, CaptionRecord& r) {
    r.sample_id = j.at("sample_id").get<std::string>();
    r.modality = modality_from_string(j.at("modality").get<std::string>());
    r.text = j.at("text").get<std::string>();
    r.attributes = j.at("attributes").get<AttributeRecord>();
}

void write_caption_file(const std::string& path, std::span<const CaptionRecord> records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IOError("cannot write caption file: " + path);
    for (const auto& r : records) out << nlohmann::json(r).dump() << '\n';
    if (!out) throw IOError("failed writing caption file: " + path);
}

std::vector<CaptionRecord> read_caption_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot read caption file: " + path);
    std::vector<CaptionRecord> out;
    for (std::string line; std::getline(in, line);) {
        if (trim(line).empty()) continue;
        out.push_back(nlohmann::json::parse(line).get<CaptionRecord>());
    }
    return out;
}

}  // namespace idea
