// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

namespace idea {

enum class Modality { RGB = 0, NIR = 1, TIR = 2 };

inline constexpr std::array<Modality, 3> kModalities{Modality::RGB, Modality::NIR, Modality::TIR};

constexpr std::size_t index_of(Modality m) { return static_cast<std::size_t>(m); }

std::string_view to_string(Modality m);
Modality modality_from_string(std::string_view s);

/// Fixed-size container indexed by modality; every modality is present exactly once.
template <typename T>
using PerModality = std::array<T, 3>;

enum class SubjectKind { Person, Vehicle };

std::string_view to_string(SubjectKind k);
SubjectKind subject_kind_from_string(std::string_view s);

}  // namespace idea
