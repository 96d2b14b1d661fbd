#include <atomic>
#include <csignal>
#include <iostream>

#include "tgar/cli.hpp"

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_sigint(int) { g_stop.store(true); }

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, on_sigint);
  const int code = tgar::run_cli(argc, argv, std::cout, std::cerr, &g_stop);
  if (g_stop.load()) return tgar::kExitInterrupted;
  return code;
}
