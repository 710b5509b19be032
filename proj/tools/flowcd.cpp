// SPDX-License-Identifier: Apache-2.0
#include "flowcd/cli.hpp"

int main(int argc, char** argv) { return flowcd::cli::run(argc, argv); }
