#include <iostream>
#include <string>
#include <vector>

#include "nxgpt/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return nxgpt::run_cli(args, std::cout, std::cerr);
}
