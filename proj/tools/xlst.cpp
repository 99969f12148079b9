#include <iostream>

#include "xlst/cli.hpp"

int main(int argc, char** argv) { return xlst::run_cli(argc, argv, std::cout, std::cerr); }
