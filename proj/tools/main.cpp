// SPDX-License-Identifier: Apache-2.0
#include "ulab/bench.hpp"

int main(int argc, char** argv) { return ulab::bench::cli(argc, argv); }
