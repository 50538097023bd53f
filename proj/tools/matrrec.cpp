#include <iostream>

#include "matrrec/cli.hpp"

int main(int argc, char** argv) {
    return matrrec::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
