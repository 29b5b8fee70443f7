#include "wavprompt/cli.hpp"

#include <iostream>

int main(int argc, char ** argv) { return wavprompt::run_cli(argc, argv, std::cout, std::cerr); }
