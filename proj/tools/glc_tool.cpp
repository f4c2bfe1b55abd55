#include <string>
#include <vector>

#include "glc/cli.hpp"

int main(int argc, char** argv) { return glc::run_cli(std::vector<std::string>(argv + 1, argv + argc)); }
