#include <iostream>
#include <string>
#include <vector>

#include "cvgl/evalcli/cli.hpp"

int main(int argc, char** argv) {
  return cvgl::cli_dispatch(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
