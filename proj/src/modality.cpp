// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/modality.hpp"

#include <stdexcept>
#include <string>

namespace idea {

std::string_view to_string(Modality m) {
    switch (m) {
        case Modality::RGB: return "RGB";
        case Modality::NIR: return "NIR";
        case Modality::TIR: return "TIR";
    }
    return "?";
}

Modality modality_from_string(std::string_view s) {
    if (s == "RGB" || s == "rgb") return Modality::RGB;
    if (s == "NIR" || s == "nir") return Modality::NIR;
    if (s == "TIR" || s == "tir") return Modality::TIR;
    throw std::invalid_argument("unknown modality: " + std::string(s));
}

std::string_view to_string(SubjectKind k) { return k == SubjectKind::Person ? "person" : "vehicle"; }

SubjectKind subject_kind_from_string(std::string_view s) {
    if (s == "person") return SubjectKind::Person;
    if (s == "vehicle") return SubjectKind::Vehicle;
    throw std::invalid_argument("unknown subject kind: " + std::string(s));
}

}  // namespace idea
