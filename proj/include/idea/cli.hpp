// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "idea/model.hpp"
#include "idea/retrieval.hpp"
#include "idea/synth_data.hpp"
#include "idea/training.hpp"

namespace idea {

/// Everything a run needs, resolved from defaults, a config file and flags.
struct RunConfig {
    SynthConfig synth;
    ModelConfig model;
    LossConfig loss;
    TrainOptions train;
    std::uint64_t seed = 1;
    Variant variant = Variant::Idea;
    std::string data_dir;
    std::string out_dir;

    /// Defaults sized for a single CPU core.
    static RunConfig defaults();

    /// Applies one dotted key, e.g. "model.num_prompts=2" or "synth.noise_rate.nir=0.5".
    void set(const std::string& key, const std::string& value);
    /// Reads "key = value" lines; '#' starts a comment.
    void load_file(const std::string& path);

    nlohmann::json to_json() const;
    /// Flat, sorted "key = value" lines that load_file reads back.
    std::string to_text() const;
    void validate() const;
};

/// Ablation report: one cell per (variant, seed), aggregates per variant,
/// and text-missing cells of the full model.
struct AblationOptions {
    std::vector<Variant> variants{Variant::Baseline, Variant::ParallelText, Variant::Imfe, Variant::Idea};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    bool text_missing = true;
};

nlohmann::json run_ablation(const RunConfig& cfg, const AblationOptions& options);

/// Entry point shared by the executable and the tests. Returns 0 on success,
/// 1 on usage errors and 2 on runtime errors.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace idea
