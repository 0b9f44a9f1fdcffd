#include <malloc.h>

#include <iostream>

#include "iconnet/cli.hpp"

int main(int argc, char** argv) {
  // Activation buffers run to hundreds of MB; keep them on the heap instead of
  // paying fresh mmap page faults on every forward pass.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return iconnet::cli::cmd_dispatch(argc, argv, std::cout, std::cerr);
}
