#include <iostream>
#include <string>
#include <vector>

#include "rpat/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return rpat::run_cli(args, std::cout, std::cerr);
}
