#include <iostream>

#include "cardnet/cli.hpp"

int main(int argc, char** argv) {
  return cardnet::run_cli(argc, argv, std::cin, std::cout, std::cerr);
}
