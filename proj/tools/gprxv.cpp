#include <iostream>

#include "gprxv/cli.hpp"

int main(int argc, char** argv)
{
    return gprxv::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
