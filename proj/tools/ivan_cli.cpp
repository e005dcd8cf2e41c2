#include <iostream>

#include "ivan/cli.hpp"

int main(int argc, char** argv) { return ivan::run_cli(argc, argv, std::cout, std::cerr); }
