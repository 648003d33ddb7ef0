#include <iostream>

#include "sdlm/cli.hpp"

int main(int argc, char** argv) { return sdlm::run_cli(argc, argv, std::cout, std::cerr); }
