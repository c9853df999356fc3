#include <cstdio>

int main() {
  // CLI wiring lands with the pipeline modules.
  std::puts("lilac: not yet assembled");
  return 1;
}
