#include "detcore/commands.hpp"

#include <iostream>

int main(int argc, char** argv) { return detcore::run_cli(argc, argv, std::cout, std::cerr); }
