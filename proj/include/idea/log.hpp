// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string_view>

namespace idea {

enum class LogLevel { Debug = 0, Info = 1, Warning = 2, Error = 3, Silent = 4 };

void set_log_level(LogLevel level);
LogLevel log_level();

void log_info(std::string_view msg);
void log_warning(std::string_view msg);
void log_error(std::string_view msg);

}  // namespace idea
