// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include <json.hpp>

#include "idea/model.hpp"

namespace idea {

/// Writes every parameter of the model's store as named float32 arrays
/// after a JSON manifest (see docs/checkpoint.md). `extra` is stored verbatim.
void save_checkpoint(const std::string& path, const IdeaModel& model, const nlohmann::json& extra = nlohmann::json::object());

/// Rebuilds the model from the stored configuration and restores all arrays,
/// including ones the model does not create itself (e.g. classifier heads).
IdeaModel load_checkpoint(const std::string& path, nlohmann::json* extra = nullptr);

/// Manifest only, without the payload.
nlohmann::json read_checkpoint_manifest(const std::string& path);

}  // namespace idea
