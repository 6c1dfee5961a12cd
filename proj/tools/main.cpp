#include <iostream>

#include "mor/cli/app.hpp"

int main(int argc, char** argv) { return mor::cli::run(argc, argv, std::cout, std::cerr); }
