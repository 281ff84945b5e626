// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

#include <doctest.h>

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "idea/synth_data.hpp"

using namespace idea;
namespace fs = std::filesystem;

namespace {

SynthConfig small_synth() {
    SynthConfig c;
    c.num_identities = 10;
    c.samples_per_identity = 4;
    c.image_height = 32;
    c.image_width = 16;
    c.family_size = 2;
    return c;
}

SynthConfig clean(SynthConfig c) {
    c.occlusion_rate = {0, 0, 0};
    c.noise_rate = {0, 0, 0};
    return c;
}

std::map<std::string, std::string> directory_contents(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& f : fs::recursive_directory_iterator(root)) {
        if (!f.is_regular_file()) continue;
        std::ifstream in(f.path(), std::ios::binary);
        std::stringstream s;
        s << in.rdbuf();
        out[fs::relative(f.path(), root).generic_string()] = s.str();
    }
    return out;
}

/// Manifest with `ids` train identities, each with `per_id` samples.
DatasetManifest train_manifest(int ids, int per_id) {
    DatasetManifest m;
    for (int id = 0; id < ids; ++id)
        for (int s = 0; s < per_id; ++s) {
            SampleEntry e;
            e.sample_id = std::to_string(id) + "_" + std::to_string(s);
            e.identity = id;
            e.camera = s % 2;
            m.samples.push_back(e);
        }
    return m;
}

}  // namespace

TEST_CASE("same seed gives byte-identical datasets") {
    idea::testing::TempDir a, b;
    generate_dataset(small_synth(), a.str());
    generate_dataset(small_synth(), b.str());
    const auto ca = directory_contents(a.path()), cb = directory_contents(b.path());
    REQUIRE(ca.size() == cb.size());
    for (const auto& [name, bytes] : ca) {
        CAPTURE(name);
        REQUIRE(cb.count(name));
        CHECK(cb.at(name) == bytes);
    }
}

TEST_CASE("dataset counts and split layout") {
    idea::testing::TempDir dir;
    const DatasetManifest m = generate_dataset(small_synth(), dir.str());
    CHECK(m.samples.size() == 40);
    int pngs = 0;
    for (const auto& f : fs::recursive_directory_iterator(dir.path())) pngs += f.path().extension() == ".png";
    CHECK(pngs == 120);
    CHECK(read_caption_file(dir / "captions.jsonl").size() == 120);
    CHECK(m.identities_in(Split::Train).size() == 5);
    CHECK_FALSE(m.identities_in(Split::Query).empty());
    CHECK_FALSE(m.indices_in(Split::Gallery).empty());
    CHECK_NOTHROW(m.validate());

    const DatasetManifest loaded = load_manifest(dir.str());
    CHECK(loaded.samples.size() == m.samples.size());
    const DatasetManifest scanned = scan_dataset_directory(dir.str());
    CHECK(scanned.samples.size() == m.samples.size());
    CHECK(scanned.image_height == 32);
    CHECK(scanned.image_width == 16);

    const Dataset ds = load_dataset(dir.str());
    for (const auto& caps : ds.captions)
        for (const auto& c : caps) CHECK_FALSE(c.empty());
}

TEST_CASE("manifest rejects identities shared across splits") {
    DatasetManifest m = train_manifest(2, 2);
    m.samples[1].split = Split::Query;
    CHECK_THROWS_AS(m.validate(), ConfigError);
}

TEST_CASE("occluded modalities lose attributes") {
    SynthConfig c = clean(small_synth());
    c.occlusion_rate = {0.0, 1.0, 0.0};
    for (int id = 0; id < 6; ++id) {
        const RenderedTriplet t = render_triplet(c, id, id % 3, id);
        CHECK(t.occluded[index_of(Modality::NIR)]);
        CHECK_FALSE(t.occluded[index_of(Modality::RGB)]);
        CHECK(t.visible[index_of(Modality::NIR)].unknown_count() > t.visible[index_of(Modality::RGB)].unknown_count());
    }
}

TEST_CASE("single-band modalities describe brightness, thermal drops colour") {
    const SynthConfig c = clean(small_synth());
    const RenderedTriplet t = render_triplet(c, 3, 0, 0);
    for (const auto& slot : person_slots()) {
        if (!is_color_slot(slot)) continue;
        const auto& nir = t.visible[index_of(Modality::NIR)][slot];
        CHECK((nir == "light" || nir == "dark"));
        CHECK(t.visible[index_of(Modality::TIR)][slot] == kUnknown);
    }
}

TEST_CASE("upper body shows the palette colour under the camera gain") {
    SynthConfig c = clean(small_synth());
    c.image_height = 64;
    c.image_width = 32;
    for (int id = 0; id < 4; ++id)
        for (int cam = 0; cam < 3; ++cam) {
            const RenderedTriplet t = render_triplet(c, id, cam, cam);
            const AttributeRecord a = identity_attributes(c, id);
            const int y = static_cast<int>(kUpperBodyCenterY * c.image_height) + t.shift_y;
            const int x = static_cast<int>(kUpperBodyCenterX * c.image_width) + t.shift_x;
            const Eigen::Vector3f expect = (palette_color(a["upper_color"]) * camera_gain(cam)).cwiseMin(1.0f);
            const Eigen::Vector3f got = t.images[index_of(Modality::RGB)].at(y, x).transpose();
            CAPTURE(id);
            CAPTURE(cam);
            CHECK((got - expect).cwiseAbs().maxCoeff() < 0.1f);
        }
}

TEST_CASE("families share attribute records") {
    const SynthConfig c = small_synth();
    CHECK(identity_attributes(c, 0) == identity_attributes(c, 1));
    CHECK(identity_attributes(c, 0).fully_specified());
}

TEST_CASE("pk batches hold P identities with K samples each") {
    const DatasetManifest m = train_manifest(10, 5);
    const auto batches = pk_batches(m, 4, 3, 7);
    CHECK(batches.size() == 3);
    std::set<int> seen;
    for (const auto& b : batches) {
        REQUIRE(b.samples.size() == 12);
        std::map<int, int> counts;
        for (std::size_t i = 0; i < b.samples.size(); ++i) {
            CHECK(m.samples[b.samples[i]].identity == b.identities[i]);
            ++counts[b.identities[i]];
            seen.insert(b.identities[i]);
        }
        CHECK(counts.size() == 4);
        for (const auto& kv : counts) CHECK(kv.second == 3);
        // every anchor has a positive and a negative
        for (std::size_t a = 0; a < b.identities.size(); ++a) {
            bool pos = false, neg = false;
            for (std::size_t j = 0; j < b.identities.size(); ++j) {
                if (j == a) continue;
                (b.identities[j] == b.identities[a] ? pos : neg) = true;
            }
            CHECK((pos && neg));
        }
    }
    CHECK(seen.size() == 10);
    CHECK(pk_batches(m, 4, 3, 7)[0].samples == batches[0].samples);
}

TEST_CASE("pk batches sample with replacement when K exceeds availability") {
    const DatasetManifest m = train_manifest(3, 2);
    for (const auto& b : pk_batches(m, 3, 5, 1)) {
        REQUIRE(b.samples.size() == 15);
        std::map<int, std::set<std::size_t>> distinct;
        for (std::size_t i = 0; i < b.samples.size(); ++i) distinct[b.identities[i]].insert(b.samples[i]);
        for (const auto& kv : distinct) CHECK(kv.second.size() == 2);
    }
    const auto single = pk_batches(m, 1, 1, 2);
    CHECK(single.size() == 3);
    for (const auto& b : single) CHECK(b.samples.size() == 1);
}

TEST_CASE("pk batches need enough identities") {
    CHECK_THROWS_AS(pk_batches(train_manifest(3, 2), 4, 2, 0), InsufficientIdentities);
    CHECK_THROWS_AS(pk_batches(train_manifest(3, 2), 0, 2, 0), ConfigError);
}

TEST_CASE("synth config validation") {
    SynthConfig c;
    c.train_fraction = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SynthConfig{};
    c.occlusion_rate[1] = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}
