#include <iostream>
#include <string>
#include <vector>

#include "avqf/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return avqf::cli::dispatch(std::move(args), std::cin, std::cout, std::cerr);
}
