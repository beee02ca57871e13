#pragma once

// Inner-loop arithmetic kernels. Every kernel has a portable scalar reference
// and, on x86-64, an AVX2/FMA variant. The active table is chosen once at
// runtime from CPUID; REMATCH_ISA=scalar in the environment forces the
// reference path.

#include <cstddef>
#include <string_view>

namespace rematch::kernels {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

template <class T>
struct KernelTable {
    Isa isa;

    // C[m,n] (+)= A[m,k] * B[k,n], all row-major and contiguous.
    void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                    bool accumulate);
    // C[m,n] (+)= A[m,k] * B[n,k]^T
    void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                    bool accumulate);
    // C[m,n] (+)= A[k,m]^T * B[k,n]
    void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
                    bool accumulate);

    // y[i] = x[i] * Phi(x[i])
    void (*gelu)(std::size_t n, const T* x, T* y);
    // dx[i] += dy[i] * (Phi(x[i]) + x[i] * phi(x[i]))
    void (*gelu_backward)(std::size_t n, const T* x, const T* dy, T* dx);

    // y += alpha * x
    void (*axpy)(std::size_t n, T alpha, const T* x, T* y);
    T (*dot)(std::size_t n, const T* x, const T* y);
};

template <class T>
const KernelTable<T>& scalar_kernels();

// nullptr when the variant was not compiled in.
template <class T>
const KernelTable<T>* avx2_kernels();

bool cpu_supports_avx2();

// Table used by the tensor ops. Thread-safe after first call.
template <class T>
const KernelTable<T>& active();

Isa active_isa();

// Overrides the runtime selection. Falls back to scalar if the requested ISA
// is unavailable; returns the ISA actually selected.
Isa select_isa(Isa requested);

}  // namespace rematch::kernels
