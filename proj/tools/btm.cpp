#include <iostream>

#include "btm/run.hpp"

int main(int argc, char** argv) { return btm::cli_main(argc, argv, std::cout, std::cerr); }
