#include <iostream>

#include "bitmar/cli.hpp"

int main(int argc, char** argv) { return bitmar::run_cli(argc, argv, std::cout, std::cerr); }
