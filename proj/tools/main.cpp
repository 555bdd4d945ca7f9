// SPDX-License-Identifier: Apache-2.0

#include <atomic>
#include <csignal>
#include <iostream>

#include "embfuse/cli.hpp"

namespace {

std::atomic<bool> g_cancel{false};

extern "C" void on_sigint(int) {
  // A second ^C falls through to the default handler.
  g_cancel.store(true);
  std::signal(SIGINT, SIG_DFL);
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, on_sigint);
  std::vector<std::string> args(argv + 1, argv + argc);
  return embfuse::run_cli(args, std::cout, std::cerr, &g_cancel);
}
