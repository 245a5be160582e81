#include <cstdio>

int main() {
  std::puts("gpsedf: command-line interface under construction");
  return 0;
}
