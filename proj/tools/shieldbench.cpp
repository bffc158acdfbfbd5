#include <iostream>

#include "shieldbench/cli.hpp"

int main(int argc, char** argv) { return shieldbench::run_cli(argc, argv, std::cout, std::cerr); }
