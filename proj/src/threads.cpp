#include "faceflow/common.hpp"

#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace faceflow {

namespace {
int g_max_threads = 0;  // 0 = library default
}

void set_max_threads(int n) {
    if (n < 1) n = 1;
    g_max_threads = n;
#ifdef _OPENMP
    omp_set_num_threads(n);
#endif
}

int max_threads() {
    if (g_max_threads > 0) return g_max_threads;
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return static_cast<int>(std::thread::hardware_concurrency());
#endif
}

}  // namespace faceflow
