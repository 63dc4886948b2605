#include <iostream>
#include <string>
#include <vector>

#include "splitkit/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return splitkit::run_cli(args, std::cout, std::cerr);
}
