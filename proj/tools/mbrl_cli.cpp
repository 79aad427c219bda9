#include <iostream>

#include "mbrl/cli.hpp"

int main(int argc, char** argv) { return mbrl::run_cli(argc, argv, std::cout, std::cerr); }
