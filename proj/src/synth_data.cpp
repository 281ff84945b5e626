// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <regex>
#include <set>

#include "idea/errors.hpp"
#include "idea/log.hpp"

namespace fs = std::filesystem;

namespace idea {
namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = splitmix(seed);
    for (auto p : parts) h = splitmix(h ^ splitmix(p + 0x51ed27ULL));
    return h;
}

// Platform-independent draws from raw 64-bit engine output.
class Draw {
public:
    explicit Draw(std::uint64_t seed) : engine_(seed) {}
    double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int integer(int lo, int hi) { return lo + static_cast<int>(engine_() % static_cast<std::uint64_t>(hi - lo + 1)); }
    bool chance(double p) { return uniform() < p; }
    double normal() {
        const double u1 = std::max(uniform(), 1e-300), u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }
    template <typename T>
    const T& pick(const std::vector<T>& v) {
        return v[static_cast<std::size_t>(integer(0, static_cast<int>(v.size()) - 1))];
    }

private:
    std::mt19937_64 engine_;
};

using Rgb = Eigen::Vector3f;

const std::map<std::string, Rgb>& palette() {
    static const std::map<std::string, Rgb> p{
        {"white", {0.95f, 0.95f, 0.95f}},  {"black", {0.06f, 0.06f, 0.06f}},   {"gray", {0.5f, 0.5f, 0.5f}},
        {"red", {0.85f, 0.12f, 0.12f}},    {"blue", {0.15f, 0.3f, 0.9f}},      {"green", {0.15f, 0.7f, 0.2f}},
        {"yellow", {0.95f, 0.88f, 0.15f}}, {"brown", {0.5f, 0.3f, 0.12f}},     {"pink", {0.95f, 0.55f, 0.7f}},
        {"purple", {0.55f, 0.2f, 0.7f}},   {"orange", {0.98f, 0.55f, 0.1f}},   {"beige", {0.88f, 0.8f, 0.62f}},
        {"dark blue", {0.08f, 0.12f, 0.45f}}, {"light blue", {0.55f, 0.75f, 0.98f}}, {"dark", {0.18f, 0.18f, 0.2f}},
        {"light", {0.82f, 0.82f, 0.8f}},   {"silver", {0.75f, 0.76f, 0.78f}}};
    return p;
}

// Colours the renderer can paint unambiguously; the generic "dark"/"light"
// words are reserved for single-band captions.
std::vector<std::string> chromatic_colors(int count) {
    std::vector<std::string> out;
    for (const auto& c : person_vocabulary().colors)
        if (c != "dark" && c != "light") out.push_back(c);
    out.resize(std::min<std::size_t>(out.size(), static_cast<std::size_t>(std::max(count, 1))));
    return out;
}

float luminance(const Rgb& c) { return 0.3f * c(0) + 0.5f * c(1) + 0.2f * c(2); }

const std::vector<Rgb>& glyph_palette() {
    static const std::vector<Rgb> g{{0.9f, 0.1f, 0.1f}, {0.1f, 0.8f, 0.1f}, {0.1f, 0.2f, 0.95f},
                                    {0.95f, 0.9f, 0.1f}, {0.05f, 0.05f, 0.05f}, {0.95f, 0.95f, 0.95f}};
    return g;
}

Rgb camera_background(int camera) {
    static const std::vector<Rgb> bg{{0.35f, 0.45f, 0.35f}, {0.5f, 0.5f, 0.56f}, {0.46f, 0.38f, 0.3f},
                                     {0.3f, 0.36f, 0.48f}, {0.55f, 0.52f, 0.42f}};
    return bg[static_cast<std::size_t>(camera) % bg.size()];
}

struct Box {
    double y0, y1, x0, x1;
    bool contains(double y, double x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
};

enum class Part { Background, Hair, Skin, Upper, Glyph, Lower, Shoes, Belonging, Clutter };

struct Pixel {
    Part part = Part::Background;
    Rgb color = Rgb::Zero();
};

/// Per-identity appearance that is not expressed in the caption.
struct FineDetail {
    std::array<int, 4> glyph{};
    float heat_offset = 0.0f;
};

FineDetail fine_detail(const SynthConfig& cfg, int identity) {
    Draw d(derive_seed(cfg.seed, {0xF1Eu, static_cast<std::uint64_t>(identity)}));
    FineDetail f;
    for (int& g : f.glyph) g = d.integer(0, static_cast<int>(glyph_palette().size()) - 1);
    f.heat_offset = static_cast<float>(d.uniform(-0.08, 0.08));
    return f;
}

Rgb belonging_color(const std::string& b) {
    if (b == "black backpack") return palette().at("black");
    if (b == "backpack") return {0.2f, 0.35f, 0.25f};
    if (b == "purse") return {0.75f, 0.2f, 0.45f};
    if (b == "handbag") return {0.45f, 0.25f, 0.1f};
    if (b == "shoulder bag") return {0.35f, 0.3f, 0.25f};
    if (b == "umbrella") return {0.1f, 0.1f, 0.35f};
    if (b == "suitcase") return {0.6f, 0.6f, 0.65f};
    if (b == "shopping bag") return {0.92f, 0.92f, 0.85f};
    return Rgb::Zero();
}

std::vector<Box> belonging_boxes(const std::string& b) {
    if (b == "backpack" || b == "black backpack") return {{0.24, 0.46, 0.8, 0.96}};
    if (b == "purse") return {{0.5, 0.58, 0.82, 0.94}};
    if (b == "handbag") return {{0.47, 0.6, 0.82, 0.97}};
    if (b == "shoulder bag") return {{0.38, 0.54, 0.8, 0.95}, {0.22, 0.38, 0.74, 0.78}};
    if (b == "umbrella") return {{0.15, 0.9, 0.88, 0.93}, {0.15, 0.2, 0.8, 1.0}};
    if (b == "suitcase") return {{0.64, 0.94, 0.8, 0.98}};
    if (b == "shopping bag") return {{0.54, 0.7, 0.8, 0.96}};
    return {};
}

const Rgb kSkin{0.86f, 0.68f, 0.55f};

/// Classifies a normalised body coordinate (y, x in [0, 1]) for an identity.
Pixel body_pixel(const AttributeRecord& a, const FineDetail& fine, double y, double x) {
    const std::string& age = a["age_group"];
    const bool small = age == "child" || age == "teenager";
    // children are drawn shorter, anchored at the feet
    if (small) {
        const double top = age == "child" ? 0.16 : 0.08;
        if (y < top) return {};
        y = (y - top) / (1.0 - top);
    }
    const bool female = a["gender"] == "woman" || a["gender"] == "girl";
    const Rgb upper = palette().at(a["upper_color"]);
    const Rgb lower = palette().at(a["lower_color"]);
    const Rgb shoe = palette().at(a["shoe_color"]);
    Rgb hair = palette().at(a["hair_color"]);
    const std::string& garment = a["upper_garment"];
    const std::string& legs = a["lower_garment"];
    const std::string& style = a["hairstyle"];

    // belongings are drawn in front of the body
    for (const Box& b : belonging_boxes(a["belongings"]))
        if (b.contains(y, x)) return {Part::Belonging, belonging_color(a["belongings"])};

    // hair
    if (Box{0.03, 0.1, 0.32, 0.68}.contains(y, x)) {
        if (style == "curly" && (int(y * 64) + int(x * 32)) % 2 == 0) hair *= 0.6f;
        return {Part::Hair, hair};
    }
    if (style == "tied-back" && Box{0.0, 0.03, 0.44, 0.56}.contains(y, x)) return {Part::Hair, hair};
    const double hair_end = style == "long" ? 0.3 : style == "shoulder-length" ? 0.22 : style == "curly" ? 0.14 : 0.0;
    if (hair_end > 0 && y >= 0.1 && y < hair_end && (Box{0, 1, 0.27, 0.35}.contains(y, x) || Box{0, 1, 0.65, 0.73}.contains(y, x)))
        return {Part::Hair, hair};
    if (garment == "hoodie" && y >= 0.07 && y < 0.22 && (Box{0, 1, 0.28, 0.35}.contains(y, x) || Box{0, 1, 0.65, 0.72}.contains(y, x)))
        return {Part::Upper, upper};
    // face
    if (Box{0.1, 0.21, 0.36, 0.64}.contains(y, x)) return {Part::Skin, kSkin};

    // torso and arms
    const double torso_bottom = garment == "coat" ? 0.68 : 0.55;
    const double half_width = female ? 0.26 : 0.3;
    const bool torso = y >= 0.22 && y < torso_bottom && std::abs(x - 0.5) < half_width;
    const bool arm = y >= 0.23 && y < 0.52 && std::abs(x - 0.5) >= half_width && std::abs(x - 0.5) < half_width + 0.1;
    if (Box{0.28, 0.42, 0.36, 0.64}.contains(y, x) && torso) {
        const int cell = (y < 0.35 ? 0 : 2) + (x < 0.5 ? 0 : 1);
        return {Part::Glyph, glyph_palette()[static_cast<std::size_t>(fine.glyph[static_cast<std::size_t>(cell)])]};
    }
    if (arm) {
        if (garment == "vest" || (garment == "t-shirt" && y > 0.36)) return {Part::Skin, kSkin};
        return {Part::Upper, upper};
    }
    if (torso) {
        Rgb c = upper;
        const int px = int(x * 32), py = int(y * 64);
        if (garment == "shirt" && px % 3 == 0) c *= 0.7f;
        if (garment == "sweater" && py % 3 == 0) c *= 0.7f;
        if ((garment == "jacket" || garment == "coat") && std::abs(x - 0.5) < 0.03) c = palette().at("black");
        if (garment == "denim jacket") c = 0.6f * c + 0.4f * Rgb(0.25f, 0.35f, 0.6f);
        return {Part::Upper, c};
    }

    // legs
    if (y >= 0.55 && y < 0.88) {
        const bool left = std::abs(x - 0.38) < 0.1, right = std::abs(x - 0.62) < 0.1;
        if (legs == "skirt") {
            const double w = 0.22 + 0.1 * (y - 0.55) / 0.2;
            if (y < 0.75 && std::abs(x - 0.5) < w) return {Part::Lower, lower};
            if (left || right) return {Part::Skin, kSkin};
            return {};
        }
        if (legs == "shorts") {
            if (y < 0.7 && std::abs(x - 0.5) < 0.22) return {Part::Lower, lower};
            if (left || right) return {Part::Skin, kSkin};
            return {};
        }
        const double w = legs == "trousers" ? 0.11 : legs == "leggings" ? 0.075 : 0.1;
        if (std::abs(x - 0.38) < w || std::abs(x - 0.62) < w) {
            Rgb c = lower;
            if (legs == "jeans" && int(y * 64) % 4 == 0) c *= 0.8f;
            return {Part::Lower, c};
        }
        if (legs == "boots" || a["shoes"] == "boots") {
            if (y > 0.82 && (left || right)) return {Part::Shoes, shoe};
        }
        return {};
    }
    // feet
    if (y >= 0.88 && y < 0.96 && (std::abs(x - 0.37) < 0.11 || std::abs(x - 0.63) < 0.11)) {
        if ((a["shoes"] == "sandals" || a["shoes"] == "slippers") && int(x * 32) % 2 == 0) return {Part::Skin, kSkin};
        return {Part::Shoes, shoe};
    }
    return {};
}

float garment_heat(const std::string& g) {
    static const std::map<std::string, float> h{{"t-shirt", 0.75f}, {"shirt", 0.7f},   {"sweater", 0.55f},
                                                {"hoodie", 0.5f},   {"jacket", 0.45f}, {"denim jacket", 0.45f},
                                                {"coat", 0.35f},    {"vest", 0.68f},   {"jeans", 0.55f},
                                                {"trousers", 0.6f}, {"shorts", 0.72f}, {"skirt", 0.7f},
                                                {"leggings", 0.72f}};
    const auto it = h.find(g);
    return it == h.end() ? 0.6f : it->second;
}

float part_heat(const AttributeRecord& a, const FineDetail& fine, Part part) {
    switch (part) {
        case Part::Skin: return 0.95f + fine.heat_offset;
        case Part::Hair: return 0.55f + fine.heat_offset;
        case Part::Upper:
        case Part::Glyph: return garment_heat(a["upper_garment"]) + fine.heat_offset;
        case Part::Lower: return garment_heat(a["lower_garment"]) + fine.heat_offset;
        case Part::Shoes: return 0.4f;
        case Part::Belonging: return 0.25f;
        case Part::Clutter: return 0.22f;
        case Part::Background: return 0.12f;
    }
    return 0.0f;
}

enum class Region { Head, Upper, Lower };

const std::vector<std::string>& region_slots(Region r) {
    static const std::vector<std::string> head{"hairstyle", "hair_color"};
    static const std::vector<std::string> upper{"upper_color", "upper_garment", "belongings"};
    static const std::vector<std::string> lower{"lower_color", "lower_garment", "shoe_color", "shoes"};
    return r == Region::Head ? head : r == Region::Upper ? upper : lower;
}

Box region_box(Region r) {
    if (r == Region::Head) return {0.0, 0.22, 0.0, 1.0};
    if (r == Region::Upper) return {0.22, 0.55, 0.0, 1.0};
    return {0.55, 1.0, 0.0, 1.0};
}

AttributeRecord single_band_colors(AttributeRecord a, bool keep_brightness) {
    for (const auto& slot : person_slots()) {
        if (!is_color_slot(slot) || a[slot] == kUnknown) continue;
        a[slot] = keep_brightness ? (luminance(palette().at(a[slot])) > 0.45f ? "light" : "dark") : std::string(kUnknown);
    }
    return a;
}

std::string identity_dir(int identity) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", identity);
    return buf;
}

std::string make_sample_id(int identity, int camera, int index) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%04d_c%d_s%02d", identity, camera, index);
    return buf;
}

}  // namespace

std::string_view to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Query: return "query";
        case Split::Gallery: return "gallery";
    }
    return "train";
}

Split split_from_string(std::string_view s) {
    if (s == "train") return Split::Train;
    if (s == "query") return Split::Query;
    if (s == "gallery") return Split::Gallery;
    throw ConfigError("unknown split: " + std::string(s));
}

void SynthConfig::validate() const {
    if (num_identities < 1 || samples_per_identity < 1 || num_cameras < 1 || color_choices < 1 || style_choices < 1 ||
        family_size < 1)
        throw ConfigError("synth: counts must be >= 1");
    if (image_height < 1 || image_width < 1) throw ConfigError("synth: image size must be >= 1");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("synth: train_fraction must lie in (0, 1)");
    for (Modality m : kModalities) {
        const double o = occlusion_rate[index_of(m)], n = noise_rate[index_of(m)];
        if (!(o >= 0.0 && o <= 1.0) || !(n >= 0.0 && n <= 1.0)) throw ConfigError("synth: probabilities must lie in [0, 1]");
    }
    if (noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be >= 0");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = nlohmann::json{{"num_identities", c.num_identities},
                       {"samples_per_identity", c.samples_per_identity},
                       {"num_cameras", c.num_cameras},
                       {"image_height", c.image_height},
                       {"image_width", c.image_width},
                       {"train_fraction", c.train_fraction},
                       {"color_choices", c.color_choices},
                       {"style_choices", c.style_choices},
                       {"family_size", c.family_size},
                       {"occlusion_rate", c.occlusion_rate},
                       {"noise_rate", c.noise_rate},
                       {"noise_sigma", c.noise_sigma},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
    SynthConfig d;
    c.num_identities = j.value("num_identities", d.num_identities);
    c.samples_per_identity = j.value("samples_per_identity", d.samples_per_identity);
    c.num_cameras = j.value("num_cameras", d.num_cameras);
    c.image_height = j.value("image_height", d.image_height);
    c.image_width = j.value("image_width", d.image_width);
    c.train_fraction = j.value("train_fraction", d.train_fraction);
    c.color_choices = j.value("color_choices", d.color_choices);
    c.style_choices = j.value("style_choices", d.style_choices);
    c.family_size = j.value("family_size", d.family_size);
    c.occlusion_rate = j.value("occlusion_rate", d.occlusion_rate);
    c.noise_rate = j.value("noise_rate", d.noise_rate);
    c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
    c.seed = j.value("seed", d.seed);
}

std::vector<int> DatasetManifest::identities_in(Split s) const {
    std::set<int> ids;
    for (const auto& e : samples)
        if (e.split == s) ids.insert(e.identity);
    return {ids.begin(), ids.end()};
}

std::vector<std::size_t> DatasetManifest::indices_in(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].split == s) out.push_back(i);
    return out;
}

void DatasetManifest::validate() const {
    const auto train = identities_in(Split::Train);
    const std::set<int> train_set(train.begin(), train.end());
    for (const auto& e : samples) {
        if (e.identity < 0 || e.camera < 0) throw ConfigError("manifest: negative identity or camera in " + e.sample_id);
        if (e.split != Split::Train && train_set.count(e.identity))
            throw ConfigError("manifest: evaluation identity " + std::to_string(e.identity) + " also appears in train");
    }
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& e : m.samples) {
        nlohmann::json images;
        for (Modality mod : kModalities) images[std::string(to_string(mod))] = e.images[index_of(mod)];
        samples.push_back({{"sample_id", e.sample_id},
                           {"identity", e.identity},
                           {"camera", e.camera},
                           {"split", to_string(e.split)},
                           {"images", images}});
    }
    j = nlohmann::json{{"image_size", {m.image_height, m.image_width}},
                       {"subject", to_string(m.subject)},
                       {"num_identities", m.num_identities},
                       {"caption_file", m.caption_file},
                       {"samples", samples}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
    m.image_height = j.at("image_size").at(0).get<int>();
    m.image_width = j.at("image_size").at(1).get<int>();
    m.subject = subject_kind_from_string(j.value("subject", std::string("person")));
    m.num_identities = j.at("num_identities").get<int>();
    m.caption_file = j.value("caption_file", std::string("captions.jsonl"));
    m.samples.clear();
    for (const auto& s : j.at("samples")) {
        SampleEntry e;
        e.sample_id = s.at("sample_id").get<std::string>();
        e.identity = s.at("identity").get<int>();
        e.camera = s.at("camera").get<int>();
        e.split = split_from_string(s.at("split").get<std::string>());
        for (Modality mod : kModalities) e.images[index_of(mod)] = s.at("images").at(std::string(to_string(mod))).get<std::string>();
        m.samples.push_back(std::move(e));
    }
}

DatasetManifest load_manifest(const std::string& root) {
    const fs::path path = fs::path(root) / "manifest.json";
    std::ifstream in(path);
    if (!in) throw IOError("cannot read manifest: " + path.string());
    DatasetManifest m;
    try {
        m = nlohmann::json::parse(in).get<DatasetManifest>();
    } catch (const nlohmann::json::exception& e) {
        throw IOError("malformed manifest " + path.string() + ": " + e.what());
    }
    m.root = root;
    m.validate();
    return m;
}

void save_manifest(const DatasetManifest& m, const std::string& root) {
    const fs::path path = fs::path(root) / "manifest.json";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IOError("cannot write manifest: " + path.string());
    out << nlohmann::json(m).dump(2) << '\n';
}

Eigen::Vector3f palette_color(const std::string& name) {
    const auto it = palette().find(name);
    if (it == palette().end()) throw ConfigError("no palette colour for '" + name + "'");
    return it->second;
}

float camera_gain(int camera) {
    static const float gains[] = {0.9f, 1.0f, 1.1f, 0.95f, 1.05f};
    return gains[static_cast<std::size_t>(camera) % 5];
}

AttributeRecord identity_attributes(const SynthConfig& cfg, int identity) {
    const int family = identity / cfg.family_size;
    Draw d(derive_seed(cfg.seed, {0xA77Eu, static_cast<std::uint64_t>(family)}));
    const auto& vocab = person_vocabulary();
    const auto colors = chromatic_colors(cfg.color_choices);
    AttributeRecord a = AttributeRecord::unknown(SubjectKind::Person);
    for (const auto& slot : person_slots()) {
        if (is_color_slot(slot)) {
            a[slot] = d.pick(colors);
            continue;
        }
        auto choices = vocab.values.at(slot);
        if (slot != "gender") choices.resize(std::min<std::size_t>(choices.size(), static_cast<std::size_t>(cfg.style_choices)));
        a[slot] = d.pick(choices);
    }
    return a;
}

RenderedTriplet render_triplet(const SynthConfig& cfg, int identity, int camera, int sample_index) {
    const AttributeRecord attrs = identity_attributes(cfg, identity);
    const FineDetail fine = fine_detail(cfg, identity);
    Draw d(derive_seed(cfg.seed, {0x5A3Fu, static_cast<std::uint64_t>(identity), static_cast<std::uint64_t>(sample_index)}));
    const int H = cfg.image_height, W = cfg.image_width;

    RenderedTriplet out;
    out.shift_x = d.integer(-2, 2) * W / 32;
    out.shift_y = d.integer(-1, 1) * H / 64;
    const float gain = camera_gain(camera);
    const Rgb bg = camera_background(camera);

    std::vector<std::pair<Box, Rgb>> clutter;
    for (int i = 0; i < 2; ++i) {
        const double y0 = d.uniform(0.0, 0.85), x0 = d.uniform() < 0.5 ? d.uniform(0.0, 0.1) : d.uniform(0.82, 0.92);
        clutter.push_back({Box{y0, y0 + d.uniform(0.05, 0.15), x0, x0 + 0.08},
                           Rgb(float(d.uniform(0.2, 0.8)), float(d.uniform(0.2, 0.8)), float(d.uniform(0.2, 0.8)))});
    }

    // scene in colour plus part labels, shared by all modalities
    std::vector<Pixel> scene(static_cast<std::size_t>(H) * W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double ny = (y - out.shift_y + 0.5) / H, nx = (x - out.shift_x + 0.5) / W;
            Pixel p = body_pixel(attrs, fine, ny, nx);
            if (p.part == Part::Background) {
                const double sy = (y + 0.5) / H, sx = (x + 0.5) / W;
                p.color = bg;
                for (const auto& [box, c] : clutter)
                    if (box.contains(sy, sx)) p = {Part::Clutter, c};
            }
            scene[static_cast<std::size_t>(y) * W + x] = p;
        }

    for (Modality m : kModalities) {
        const std::size_t mi = index_of(m);
        Image img(H, W);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const Pixel& p = scene[static_cast<std::size_t>(y) * W + x];
                Rgb v;
                if (m == Modality::RGB) {
                    v = p.color * gain;
                } else if (m == Modality::NIR) {
                    v = Rgb::Constant(std::clamp(0.1f + 0.9f * luminance(p.color), 0.0f, 1.0f) * gain);
                } else {
                    v = Rgb::Constant(part_heat(attrs, fine, p.part));
                }
                img.at(y, x) = v.transpose();
            }
        if (m == Modality::TIR) {
            // heat diffuses: 3x3 box blur
            Image blurred(H, W);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    Eigen::RowVector3f acc = Eigen::RowVector3f::Zero();
                    int n = 0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int yy = y + dy, xx = x + dx;
                            if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                            acc += img.at(yy, xx);
                            ++n;
                        }
                    blurred.at(y, x) = acc / float(n);
                }
            img = std::move(blurred);
        }

        AttributeRecord visible = m == Modality::RGB ? attrs : single_band_colors(attrs, m == Modality::NIR);
        if (d.chance(cfg.occlusion_rate[mi])) {
            const auto region = static_cast<Region>(d.integer(0, 2));
            const Box box = region_box(region);
            const Rgb fill = Rgb::Constant(float(d.uniform(0.3, 0.7)));
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    if (box.contains((y + 0.5) / H, (x + 0.5) / W)) img.at(y, x) = fill.transpose();
            for (const auto& slot : region_slots(region)) visible[slot] = std::string(kUnknown);
            out.occluded[mi] = true;
        }
        if (d.chance(cfg.noise_rate[mi])) {
            for (Eigen::Index i = 0; i < img.pixels.rows(); ++i)
                for (int c = 0; c < 3; ++c) img.pixels(i, c) += static_cast<float>(cfg.noise_sigma * d.normal());
            out.noisy[mi] = true;
        }
        img.pixels = img.pixels.cwiseMax(0.0f).cwiseMin(1.0f);
        out.images[mi] = std::move(img);
        out.visible[mi] = std::move(visible);
    }
    return out;
}

DatasetManifest generate_dataset(const SynthConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IOError("cannot create " + out_dir + ": " + ec.message());

    DatasetManifest m;
    m.root = out_dir;
    m.image_height = cfg.image_height;
    m.image_width = cfg.image_width;
    m.num_identities = cfg.num_identities;
    const int num_train = std::clamp(static_cast<int>(std::lround(cfg.num_identities * cfg.train_fraction)), 1,
                                     std::max(cfg.num_identities - 1, 1));

    std::vector<CaptionRecord> captions;
    for (int id = 0; id < cfg.num_identities; ++id) {
        for (int s = 0; s < cfg.samples_per_identity; ++s) {
            const int camera = s % cfg.num_cameras;
            SampleEntry e;
            e.sample_id = make_sample_id(id, camera, s);
            e.identity = id;
            e.camera = camera;
            e.split = id < num_train ? Split::Train : (s % 4 == 0 ? Split::Query : Split::Gallery);
            const fs::path dir = fs::path(std::string(to_string(e.split))) / identity_dir(id);
            fs::create_directories(fs::path(out_dir) / dir, ec);
            if (ec) throw IOError("cannot create " + (fs::path(out_dir) / dir).string() + ": " + ec.message());
            const RenderedTriplet t = render_triplet(cfg, id, camera, s);
            for (Modality mod : kModalities) {
                const std::size_t mi = index_of(mod);
                const fs::path rel = dir / (e.sample_id + "_" + std::string(to_string(mod)) + ".png");
                write_png((fs::path(out_dir) / rel).string(), t.images[mi]);
                e.images[mi] = rel.generic_string();
                captions.push_back(CaptionRecord{e.sample_id, mod, fill_template(t.visible[mi], mod).text, t.visible[mi]});
            }
            m.samples.push_back(std::move(e));
        }
    }
    write_caption_file((fs::path(out_dir) / m.caption_file).string(), captions);
    save_manifest(m, out_dir);
    nlohmann::json cfg_json = cfg;
    std::ofstream(fs::path(out_dir) / "synth_config.json", std::ios::binary) << cfg_json.dump(2) << '\n';
    return m;
}

DatasetManifest scan_dataset_directory(const std::string& root) {
    if (!fs::is_directory(root)) throw IOError("not a directory: " + root);
    const std::regex name_re(R"((.+)_(RGB|NIR|TIR)\.png)");
    const std::regex cam_re(R"((?:^|_)c(\d+)(?:_|$))");
    std::map<std::string, SampleEntry> by_id;
    DatasetManifest m;
    m.root = root;
    std::set<int> identities;
    for (Split split : {Split::Train, Split::Query, Split::Gallery}) {
        const fs::path split_dir = fs::path(root) / std::string(to_string(split));
        if (!fs::is_directory(split_dir)) continue;
        for (const auto& file : fs::recursive_directory_iterator(split_dir)) {
            std::smatch match;
            const std::string fname = file.path().filename().string();
            if (!file.is_regular_file() || !std::regex_match(fname, match, name_re)) continue;
            const std::string sample_id = match[1].str();
            SampleEntry& e = by_id[sample_id];
            e.sample_id = sample_id;
            e.split = split;
            e.identity = std::stoi(file.path().parent_path().filename().string());
            std::smatch cam;
            e.camera = std::regex_search(sample_id, cam, cam_re) ? std::stoi(cam[1].str()) : 0;
            e.images[index_of(modality_from_string(match[2].str()))] = fs::relative(file.path(), root).generic_string();
            identities.insert(e.identity);
            if (m.image_height == 0) {
                const Image img = read_png(file.path().string());
                m.image_height = img.height;
                m.image_width = img.width;
            }
        }
    }
    for (auto& [id, e] : by_id) {
        for (Modality mod : kModalities)
            if (e.images[index_of(mod)].empty())
                throw IOError("sample " + id + " lacks its " + std::string(to_string(mod)) + " image");
        m.samples.push_back(std::move(e));
    }
    m.num_identities = static_cast<int>(identities.size());
    m.validate();
    return m;
}

Dataset load_dataset(const std::string& root) { return load_dataset(load_manifest(root)); }

Dataset load_dataset(const DatasetManifest& manifest) {
    Dataset ds;
    ds.manifest = manifest;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < manifest.samples.size(); ++i) index[manifest.samples[i].sample_id] = i;
    ds.images.resize(manifest.samples.size());
    ds.captions.resize(manifest.samples.size());
    for (std::size_t i = 0; i < manifest.samples.size(); ++i)
        for (Modality mod : kModalities) {
            Image img = read_png((fs::path(manifest.root) / manifest.samples[i].images[index_of(mod)]).string());
            if (img.height != manifest.image_height || img.width != manifest.image_width)
                throw ShapeMismatch("image size differs from manifest: " + manifest.samples[i].images[index_of(mod)]);
            ds.images[i][index_of(mod)] = std::move(img);
        }
    const fs::path caption_path = fs::path(manifest.root) / manifest.caption_file;
    if (fs::exists(caption_path)) {
        for (const auto& rec : read_caption_file(caption_path.string())) {
            const auto it = index.find(rec.sample_id);
            if (it != index.end()) ds.captions[it->second][index_of(rec.modality)] = rec.text;
        }
    } else {
        log_warning("no caption file at " + caption_path.string() + "; using blank captions");
    }
    return ds;
}

std::vector<Batch> pk_batches(const DatasetManifest& manifest, int p, int k, std::uint64_t seed) {
    if (p < 1 || k < 1) throw ConfigError("pk_batches: P and K must be >= 1");
    std::map<int, std::vector<std::size_t>> by_identity;
    for (std::size_t i = 0; i < manifest.samples.size(); ++i)
        if (manifest.samples[i].split == Split::Train) by_identity[manifest.samples[i].identity].push_back(i);
    if (static_cast<int>(by_identity.size()) < p)
        throw InsufficientIdentities("pk_batches: " + std::to_string(by_identity.size()) + " train identities, P=" +
                                     std::to_string(p));

    std::mt19937_64 rng(seed);
    std::vector<int> ids;
    for (const auto& kv : by_identity) ids.push_back(kv.first);
    std::shuffle(ids.begin(), ids.end(), rng);

    std::vector<Batch> batches;
    for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(p)) {
        std::vector<int> chosen(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), start + p)));
        // pad the last group with identities not already in it
        std::vector<int> pool;
        for (int id : ids)
            if (std::find(chosen.begin(), chosen.end(), id) == chosen.end()) pool.push_back(id);
        std::shuffle(pool.begin(), pool.end(), rng);
        for (std::size_t i = 0; static_cast<int>(chosen.size()) < p; ++i) chosen.push_back(pool[i]);

        Batch b;
        for (int id : chosen) {
            auto samples = by_identity.at(id);
            std::shuffle(samples.begin(), samples.end(), rng);
            for (int j = 0; j < k; ++j) {
                const std::size_t pickn = j < static_cast<int>(samples.size())
                                              ? samples[static_cast<std::size_t>(j)]
                                              : samples[static_cast<std::size_t>(rng() % samples.size())];
                b.samples.push_back(pickn);
                b.identities.push_back(id);
            }
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace idea
