#include "semalign/commands.hpp"

#include <iostream>

int main(int argc, char** argv) { return semalign::run_cli(argc, argv, std::cout, std::cerr); }
