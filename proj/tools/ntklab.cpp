#include <iostream>

#include "ntklab/cli.hpp"

int main(int argc, char** argv) { return ntklab::cli::run_cli(argc, argv, std::cout, std::cerr); }
