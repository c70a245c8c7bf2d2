#include "ecpec/pipeline.hpp"

#include <iostream>

int main(int argc, char** argv) { return ecpec::run_cli(argc, argv, std::cout, std::cerr); }
