#include <iostream>
#include <string>
#include <vector>

#include "apc/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return apc::run_cli(args, std::cout, std::cerr);
}
