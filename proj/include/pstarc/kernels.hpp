#pragma once

#include <cstddef>

namespace pstarc::kernels {

// Dense double-precision inner loops. Every entry has a scalar reference
// implementation and, on x86-64 with AVX2+FMA, a vectorized variant. The
// active table is resolved once per process; set PSTARC_KERNELS=scalar|avx2
// to force a backend (default: best available).
//
// Reductions (dot, sum) may differ between backends in the last bits because
// the accumulation order differs; elementwise ops are bitwise identical.
struct Ops {
    const char* name;
    double (*dot)(const double* a, const double* b, std::size_t n);
    void (*axpy)(double* y, double a, const double* x, std::size_t n);  // y += a*x
    void (*add)(double* out, const double* a, const double* b, std::size_t n);
    void (*sub)(double* out, const double* a, const double* b, std::size_t n);
    void (*mul)(double* out, const double* a, const double* b, std::size_t n);
    void (*scale)(double* out, const double* a, double c, std::size_t n);
    double (*sum)(const double* a, std::size_t n);
    double (*max)(const double* a, std::size_t n);  // requires n >= 1
};

const Ops& scalar_ops();
const Ops* avx2_ops();  // nullptr when not compiled in or not supported by the CPU
const Ops& active_ops();
const char* active_backend();

// Row-major matrix products built on the dispatched primitives. When
// `accumulate` is false the output is overwritten, otherwise added into.
// c: m x n, a: m x k, b: k x n
void matmul_nn(double* c, const double* a, const double* b,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
// c: m x n, a: m x k, b: n x k  (c = a * b^T)
void matmul_nt(double* c, const double* a, const double* b,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
// c: k x n, a: m x k, b: m x n  (c = a^T * b)
void matmul_tn(double* c, const double* a, const double* b,
               std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

}  // namespace pstarc::kernels
