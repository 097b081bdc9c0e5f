#include "isslab/cli.hpp"
#include "isslab/runtime.hpp"

#include <iostream>

int main(int argc, char** argv) {
  isslab::tune_allocator();
  return isslab::cli::run(argc, argv, std::cout, std::cerr);
}
