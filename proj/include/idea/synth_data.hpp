// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "idea/captions.hpp"
#include "idea/image.hpp"
#include "idea/modality.hpp"

namespace idea {

enum class Split { Train, Query, Gallery };

std::string_view to_string(Split s);
Split split_from_string(std::string_view s);

struct SynthConfig {
    int num_identities = 48;
    int samples_per_identity = 8;
    int num_cameras = 3;
    int image_height = 64;
    int image_width = 32;
    double train_fraction = 0.5;  // share of identities used for training; the rest are evaluation
    int color_choices = 8;        // colours drawn from the palette
    int style_choices = 4;        // garments / shoes / hairstyles / belongings drawn per slot
    int family_size = 3;          // identities sharing one attribute record (differ in fine detail)
    PerModality<double> occlusion_rate{0.15, 0.15, 0.15};
    PerModality<double> noise_rate{0.3, 0.3, 0.3};
    double noise_sigma = 0.25;
    std::uint64_t seed = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct SampleEntry {
    std::string sample_id;
    int identity = 0;
    int camera = 0;
    Split split = Split::Train;
    PerModality<std::string> images;  // paths relative to the dataset root
};

/// Index of a multi-modal ReID dataset rooted at `root`.
struct DatasetManifest {
    std::string root;
    int image_height = 0;
    int image_width = 0;
    SubjectKind subject = SubjectKind::Person;
    int num_identities = 0;
    std::string caption_file = "captions.jsonl";
    std::vector<SampleEntry> samples;

    std::vector<int> identities_in(Split s) const;
    std::vector<std::size_t> indices_in(Split s) const;
    /// Checks that train identities are disjoint from query/gallery identities.
    void validate() const;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

DatasetManifest load_manifest(const std::string& root);
void save_manifest(const DatasetManifest& m, const std::string& root);

/// Named palette colour used by the renderer for a caption colour word.
Eigen::Vector3f palette_color(const std::string& name);

/// Latent attribute record of one synthetic identity.
AttributeRecord identity_attributes(const SynthConfig& cfg, int identity);

/// Brightness multiplier applied by a camera to everything it renders.
float camera_gain(int camera);

/// Normalised vertical band of the upper garment centre used by consistency checks.
inline constexpr double kUpperBodyCenterY = 0.47;
inline constexpr double kUpperBodyCenterX = 0.3;

/// One rendered observation before it is written to disk.
struct RenderedTriplet {
    PerModality<Image> images;
    PerModality<AttributeRecord> visible;  // latent record masked by what each modality shows
    PerModality<bool> occluded{false, false, false};
    PerModality<bool> noisy{false, false, false};
    int shift_x = 0;
    int shift_y = 0;
};

RenderedTriplet render_triplet(const SynthConfig& cfg, int identity, int camera, int sample_index);

/// Renders identity-determined glyph images for all three modalities and
/// writes images, captions.jsonl and manifest.json under out_dir.
DatasetManifest generate_dataset(const SynthConfig& cfg, const std::string& out_dir);

/// Builds a manifest from an existing <split>/<identity>/<sample_id>_<modality>.png
/// tree; the camera is read from a "c<digits>" token of the sample id.
DatasetManifest scan_dataset_directory(const std::string& root);

/// Images and captions of every sample, loaded into memory.
struct Dataset {
    DatasetManifest manifest;
    std::vector<PerModality<Image>> images;
    std::vector<PerModality<std::string>> captions;  // "" when the caption file has no record
};

Dataset load_dataset(const std::string& root);
Dataset load_dataset(const DatasetManifest& manifest);

/// One P×K batch: sample indices into the manifest and their identities.
struct Batch {
    std::vector<std::size_t> samples;
    std::vector<int> identities;
};

/// Batches covering every train identity at least once. Each batch holds
/// exactly P identities × K samples, drawing with replacement when an
/// identity has fewer than K samples.
std::vector<Batch> pk_batches(const DatasetManifest& manifest, int p, int k, std::uint64_t seed);

}  // namespace idea
