#include <iostream>

#include "sfb/cli.hpp"

int main(int argc, char** argv) { return sfb::cli::dispatch(argc, argv, std::cout, std::cerr); }
