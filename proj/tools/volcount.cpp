// Copyright Contributors to the volcount Project
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>

int main() {
  std::printf("volcount: subcommands not wired up yet\n");
  return 1;
}
