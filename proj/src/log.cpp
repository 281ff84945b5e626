// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace idea {
namespace {

std::atomic<LogLevel> g_level{LogLevel::Info};
std::mutex g_mutex;

void emit(LogLevel level, std::string_view tag, std::string_view msg) {
    if (level < g_level.load()) return;
    std::lock_guard lock(g_mutex);
    std::clog << '[' << tag << "] " << msg << '\n';
}

}  // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level.load(); }

void log_info(std::string_view msg) { emit(LogLevel::Info, "info", msg); }
void log_warning(std::string_view msg) { emit(LogLevel::Warning, "warn", msg); }
void log_error(std::string_view msg) { emit(LogLevel::Error, "error", msg); }

}  // namespace idea
