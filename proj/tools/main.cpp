#include "cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return stiffnet::cli::run(argc, argv, std::cout, std::cerr); }
