// Copyright (c) 2026 the proglm authors
// SPDX-License-Identifier: Apache-2.0

#include "proglm/cli.hpp"

int main(int argc, char** argv) { return proglm::cli::cli_main(argc, argv); }
