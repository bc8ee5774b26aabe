#include "soft/cli.hpp"

#include <atomic>
#include <csignal>
#include <iostream>

namespace {

std::atomic<bool> g_interrupt{false};

extern "C" void on_sigint(int) { g_interrupt.store(true); }

}  // namespace

int main(int argc, char** argv) {
    std::signal(SIGINT, on_sigint);
    return soft::run_cli(argc, argv, std::cout, std::cerr, &g_interrupt);
}
