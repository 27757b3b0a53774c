// tools/ca.cpp -- placeholder main, subcommands wired in as modules land.
#include <cstdio>

int main() {
  std::puts("ca: not yet wired");
  return 0;
}
