#include <iostream>

#include "commands.hpp"

int main(int argc, char** argv) { return uprm::cli::run_cli(argc, argv, std::cout, std::cerr); }
