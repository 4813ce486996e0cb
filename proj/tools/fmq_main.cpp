#include <cstdio>

int main() {
  std::puts("fmq cli placeholder");
  return 0;
}
