#include <iostream>
#include <string>
#include <vector>

#include "ctok/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return ctok::run_cli(args, std::cout, std::cerr);
}
