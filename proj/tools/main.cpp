#include "cli.hpp"

#include "dvne/rendering.hpp"

#include <iostream>

int main(int argc, char** argv) {
    dvne::retain_freed_memory();
    return dvne::cli::dispatch(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
