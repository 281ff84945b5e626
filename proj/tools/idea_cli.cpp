// Copyright (C) 2026 The idea-reid Authors
// SPDX-License-Identifier: Apache-2.0

#include "idea/cli.hpp"

int main(int argc, char** argv) { return idea::run(argc, argv); }
