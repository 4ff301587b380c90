#include <iostream>

#include "adn/cli.hpp"

int main(int argc, char** argv) { return adn::run_cli(argc, argv, std::cout, std::cerr); }
