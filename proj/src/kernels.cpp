#include "pstarc/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace pstarc::kernels {

const Ops* avx2_compiled_ops();  // defined in kernels_avx2.cpp

namespace {

bool cpu_has_avx2() {
#if defined(PSTARC_HAVE_AVX2)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const Ops* resolve_active() {
    const Ops* avx2 = cpu_has_avx2() ? avx2_compiled_ops() : nullptr;
    if (const char* env = std::getenv("PSTARC_KERNELS")) {
        if (std::strcmp(env, "scalar") == 0) return &scalar_ops();
        if (std::strcmp(env, "avx2") == 0 && avx2) return avx2;
    }
    return avx2 ? avx2 : &scalar_ops();
}

}  // namespace

const Ops* avx2_ops() { return cpu_has_avx2() ? avx2_compiled_ops() : nullptr; }

const Ops& active_ops() {
    static const Ops* active = resolve_active();
    return *active;
}

const char* active_backend() { return active_ops().name; }

void matmul_nn(double* c, const double* a, const double* b,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    const Ops& ops = active_ops();
    if (!accumulate) std::memset(c, 0, m * n * sizeof(double));
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t l = 0; l < k; ++l) ops.axpy(crow, arow[l], b + l * n, n);
    }
}

void matmul_nt(double* c, const double* a, const double* b,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    const Ops& ops = active_ops();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double v = ops.dot(arow, b + j * k, k);
            crow[j] = accumulate ? crow[j] + v : v;
        }
    }
}

void matmul_tn(double* c, const double* a, const double* b,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    const Ops& ops = active_ops();
    if (!accumulate) std::memset(c, 0, k * n * sizeof(double));
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t l = 0; l < k; ++l) ops.axpy(c + l * n, arow[l], brow, n);
    }
}

}  // namespace pstarc::kernels
