// Placeholder entry point; the full command suite lands with the pipeline.
#include <iostream>

int main() {
  std::cout << "unvalley\n";
  return 0;
}
