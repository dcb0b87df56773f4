#include <iostream>
#include <string>
#include <vector>

#include "nt/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return nt::cli_dispatch(args, std::cout, std::cerr);
}
