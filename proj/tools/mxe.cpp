#include <iostream>
#include <string>
#include <vector>

#include "mxe/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mxe::run_cli(std::move(args), std::cout, std::cerr);
}
