#include <vector>
#include <string>

#include "latentbank/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return latentbank::cli::run(args);
}
