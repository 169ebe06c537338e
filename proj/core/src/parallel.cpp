#include "pas/parallel.hpp"

#include <cstdlib>

namespace pas {

int thread_count() {
  static const int count = [] {
    const char* env = std::getenv("PAS_THREADS");
    if (!env) return 1;
    int n = std::atoi(env);
    return n > 0 ? n : 1;
  }();
  return count;
}

}  // namespace pas
