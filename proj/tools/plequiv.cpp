#include <iostream>

#include "plequiv/cli.hpp"

int main(int argc, char** argv) { return plequiv::cli::run(argc, argv, std::cout, std::cerr); }
