#include <string>
#include <vector>

#include "fedtok/cli.hpp"

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv + 1, argv + argc);
    return fedtok::cli_main(args);
}
