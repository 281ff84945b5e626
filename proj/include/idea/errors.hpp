// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace idea {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define IDEA_DECLARE_ERROR(Name) \
    struct Name : Error {        \
        using Error::Error;      \
    }

IDEA_DECLARE_ERROR(ShapeMismatch);
IDEA_DECLARE_ERROR(InvalidLabel);
IDEA_DECLARE_ERROR(DegenerateBatch);
IDEA_DECLARE_ERROR(UnparseableCaption);
IDEA_DECLARE_ERROR(ClientError);
IDEA_DECLARE_ERROR(InsufficientIdentities);
IDEA_DECLARE_ERROR(EmptyGallery);
IDEA_DECLARE_ERROR(UnknownQuery);
IDEA_DECLARE_ERROR(ConfigError);
IDEA_DECLARE_ERROR(IOError);
IDEA_DECLARE_ERROR(SequenceTooLong);

#undef IDEA_DECLARE_ERROR

}  // namespace idea
