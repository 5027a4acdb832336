#include "cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return oslsel::cli::run(argc, argv, std::cout, std::cerr); }
