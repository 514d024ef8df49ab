#include <vector>

#include "nerveseg/cli.hpp"

int main(int argc, char** argv) {
    return nerveseg::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
