#include <string>
#include <vector>

#include "aim/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return aim::run_cli(args);
}
