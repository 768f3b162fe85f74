#include <iostream>
#include <string>
#include <vector>

#include "seqmask/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return seqmask::cli::run(args, std::cout, std::cerr);
}
