// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "tinydeploy/cli.hpp"

int main(int argc, char** argv) {
  return tinydeploy::cli_main(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
