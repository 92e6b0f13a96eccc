#include <iostream>
#include <string>
#include <vector>

#include "mededge/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return mededge::run_cli(args, std::cout, std::cerr);
}
