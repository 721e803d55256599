#include <vector>

#include "latentjudge/cli.hpp"

int main(int argc, char** argv) {
  return lj::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
