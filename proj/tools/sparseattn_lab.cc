#include <iostream>
#include <string>
#include <vector>

#include "cli/common.h"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return sparseattn::cli::run_cli(args, std::cout, std::cerr);
}
