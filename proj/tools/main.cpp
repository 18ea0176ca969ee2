#include <iostream>

#include "overfill/cli.hpp"

int main(int argc, char** argv) {
  return overfill::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
