// AVX2/FMA variants. This translation unit is compiled with -mavx2 -mfma and
// must only be entered after cpu_supports_avx2() returned true.

#include "rematch/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace rematch::kernels {
namespace {

template <class T>
struct Vec;

template <>
struct Vec<float> {
    using reg = __m256;
    static constexpr std::size_t width = 8;
    static reg zero() { return _mm256_setzero_ps(); }
    static reg set1(float v) { return _mm256_set1_ps(v); }
    static reg load(const float* p) { return _mm256_loadu_ps(p); }
    static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
    static reg add(reg a, reg b) { return _mm256_add_ps(a, b); }
    static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
    static __m256i tail_mask(std::size_t count) {
        const __m256i lanes = _mm256_setr_epi32(0, 1, 2, 3, 4, 5, 6, 7);
        return _mm256_cmpgt_epi32(_mm256_set1_epi32(static_cast<int>(count)), lanes);
    }
    static reg maskload(const float* p, __m256i m) { return _mm256_maskload_ps(p, m); }
    static void maskstore(float* p, __m256i m, reg v) { _mm256_maskstore_ps(p, m, v); }
    static float hsum(reg v) {
        __m128 lo = _mm256_castps256_ps128(v);
        __m128 hi = _mm256_extractf128_ps(v, 1);
        lo = _mm_add_ps(lo, hi);
        __m128 shuf = _mm_movehdup_ps(lo);
        __m128 sums = _mm_add_ps(lo, shuf);
        shuf = _mm_movehl_ps(shuf, sums);
        sums = _mm_add_ss(sums, shuf);
        return _mm_cvtss_f32(sums);
    }
};

template <>
struct Vec<double> {
    using reg = __m256d;
    static constexpr std::size_t width = 4;
    static reg zero() { return _mm256_setzero_pd(); }
    static reg set1(double v) { return _mm256_set1_pd(v); }
    static reg load(const double* p) { return _mm256_loadu_pd(p); }
    static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
    static reg add(reg a, reg b) { return _mm256_add_pd(a, b); }
    static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
    static __m256i tail_mask(std::size_t count) {
        const __m256i lanes = _mm256_setr_epi64x(0, 1, 2, 3);
        return _mm256_cmpgt_epi64(_mm256_set1_epi64x(static_cast<long long>(count)), lanes);
    }
    static reg maskload(const double* p, __m256i m) { return _mm256_maskload_pd(p, m); }
    static void maskstore(double* p, __m256i m, reg v) { _mm256_maskstore_pd(p, m, v); }
    static double hsum(reg v) {
        __m128d lo = _mm256_castpd256_pd128(v);
        __m128d hi = _mm256_extractf128_pd(v, 1);
        lo = _mm_add_pd(lo, hi);
        __m128d high64 = _mm_unpackhi_pd(lo, lo);
        return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
    }
};

constexpr std::size_t kDepthBlock = 256;

// R rows of C starting at row i0, columns [0, n). A(i, p) = a[i * ars + p * acs].
template <class T, int R>
inline void rows_kernel(std::size_t i0, std::size_t n, std::size_t k, const T* a, std::size_t ars,
                        std::size_t acs, const T* b, T* c, bool accumulate) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    using reg = typename V::reg;

    std::size_t j = 0;
    for (; j + 2 * W <= n; j += 2 * W) {
        reg acc[R][2];
        for (int r = 0; r < R; ++r) acc[r][0] = acc[r][1] = V::zero();
        for (std::size_t p = 0; p < k; ++p) {
            const reg b0 = V::load(b + p * n + j);
            const reg b1 = V::load(b + p * n + j + W);
            for (int r = 0; r < R; ++r) {
                const reg ar = V::set1(a[(i0 + r) * ars + p * acs]);
                acc[r][0] = V::fmadd(ar, b0, acc[r][0]);
                acc[r][1] = V::fmadd(ar, b1, acc[r][1]);
            }
        }
        for (int r = 0; r < R; ++r) {
            T* cp = c + (i0 + r) * n + j;
            if (accumulate) {
                acc[r][0] = V::add(acc[r][0], V::load(cp));
                acc[r][1] = V::add(acc[r][1], V::load(cp + W));
            }
            V::store(cp, acc[r][0]);
            V::store(cp + W, acc[r][1]);
        }
    }
    for (; j < n; j += W) {
        const std::size_t count = std::min(W, n - j);
        const __m256i m = V::tail_mask(count);
        reg acc[R];
        for (int r = 0; r < R; ++r) acc[r] = V::zero();
        for (std::size_t p = 0; p < k; ++p) {
            const reg b0 = V::maskload(b + p * n + j, m);
            for (int r = 0; r < R; ++r) {
                acc[r] = V::fmadd(V::set1(a[(i0 + r) * ars + p * acs]), b0, acc[r]);
            }
        }
        for (int r = 0; r < R; ++r) {
            T* cp = c + (i0 + r) * n + j;
            if (accumulate) acc[r] = V::add(acc[r], V::maskload(cp, m));
            V::maskstore(cp, m, acc[r]);
        }
    }
}

template <class T>
void gemm_strided_a(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t ars,
                    std::size_t acs, const T* b, T* c, bool accumulate) {
    if (k == 0) {
        if (!accumulate) std::fill(c, c + m * n, T(0));
        return;
    }
    for (std::size_t p0 = 0; p0 < k; p0 += kDepthBlock) {
        const std::size_t kb = std::min(kDepthBlock, k - p0);
        const bool acc = accumulate || p0 > 0;
        const T* ab = a + p0 * acs;
        const T* bb = b + p0 * n;
        std::size_t i = 0;
        for (; i + 4 <= m; i += 4) rows_kernel<T, 4>(i, n, kb, ab, ars, acs, bb, c, acc);
        for (; i < m; ++i) rows_kernel<T, 1>(i, n, kb, ab, ars, acs, bb, c, acc);
    }
}

template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
    gemm_strided_a(m, n, k, a, k, 1, b, c, accumulate);
}

template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
    gemm_strided_a(m, n, k, a, 1, m, b, c, accumulate);
}

// Dot products of `RI` rows of A against `RJ` rows of B.
template <class T, int RI, int RJ>
inline void dot_block(std::size_t i0, std::size_t j0, std::size_t n, std::size_t k, const T* a,
                      const T* b, T* c, bool accumulate) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    using reg = typename V::reg;
    reg acc[RI][RJ];
    for (int r = 0; r < RI; ++r)
        for (int s = 0; s < RJ; ++s) acc[r][s] = V::zero();
    std::size_t p = 0;
    for (; p + W <= k; p += W) {
        reg bv[RJ];
        for (int s = 0; s < RJ; ++s) bv[s] = V::load(b + (j0 + s) * k + p);
        for (int r = 0; r < RI; ++r) {
            const reg av = V::load(a + (i0 + r) * k + p);
            for (int s = 0; s < RJ; ++s) acc[r][s] = V::fmadd(av, bv[s], acc[r][s]);
        }
    }
    if (p < k) {
        const __m256i m = V::tail_mask(k - p);
        reg bv[RJ];
        for (int s = 0; s < RJ; ++s) bv[s] = V::maskload(b + (j0 + s) * k + p, m);
        for (int r = 0; r < RI; ++r) {
            const reg av = V::maskload(a + (i0 + r) * k + p, m);
            for (int s = 0; s < RJ; ++s) acc[r][s] = V::fmadd(av, bv[s], acc[r][s]);
        }
    }
    for (int r = 0; r < RI; ++r) {
        for (int s = 0; s < RJ; ++s) {
            T& out = c[(i0 + r) * n + j0 + s];
            const T v = V::hsum(acc[r][s]);
            out = accumulate ? out + v : v;
        }
    }
}

template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
    std::size_t i = 0;
    for (; i + 2 <= m; i += 2) {
        std::size_t j = 0;
        for (; j + 4 <= n; j += 4) dot_block<T, 2, 4>(i, j, n, k, a, b, c, accumulate);
        for (; j < n; ++j) dot_block<T, 2, 1>(i, j, n, k, a, b, c, accumulate);
    }
    for (; i < m; ++i) {
        std::size_t j = 0;
        for (; j + 4 <= n; j += 4) dot_block<T, 1, 4>(i, j, n, k, a, b, c, accumulate);
        for (; j < n; ++j) dot_block<T, 1, 1>(i, j, n, k, a, b, c, accumulate);
    }
}

template <class T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    const auto av = V::set1(alpha);
    std::size_t i = 0;
    for (; i + W <= n; i += W) V::store(y + i, V::fmadd(av, V::load(x + i), V::load(y + i)));
    for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

template <class T>
T dot(std::size_t n, const T* x, const T* y) {
    using V = Vec<T>;
    constexpr std::size_t W = V::width;
    auto acc0 = V::zero();
    auto acc1 = V::zero();
    std::size_t i = 0;
    for (; i + 2 * W <= n; i += 2 * W) {
        acc0 = V::fmadd(V::load(x + i), V::load(y + i), acc0);
        acc1 = V::fmadd(V::load(x + i + W), V::load(y + i + W), acc1);
    }
    T total = V::hsum(V::add(acc0, acc1));
    for (; i < n; ++i) total += x[i] * y[i];
    return total;
}

// exp(x) for float lanes, cephes-style range reduction. Max rel. error ~2 ulp
// on [-87, 88].
inline __m256 exp_ps(__m256 x) {
    const __m256 hi = _mm256_set1_ps(88.3762626647949f);
    const __m256 lo = _mm256_set1_ps(-87.3365447504f);
    x = _mm256_max_ps(_mm256_min_ps(x, hi), lo);

    const __m256 log2e = _mm256_set1_ps(1.44269504088896341f);
    __m256 fx = _mm256_round_ps(_mm256_mul_ps(x, log2e), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(0.693359375f), x);
    x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(-2.12194440e-4f), x);

    __m256 y = _mm256_set1_ps(1.9875691500e-4f);
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201e-1f));
    y = _mm256_fmadd_ps(y, _mm256_mul_ps(x, x), _mm256_add_ps(x, _mm256_set1_ps(1.0f)));

    __m256i n = _mm256_cvtps_epi32(fx);
    n = _mm256_slli_epi32(_mm256_add_epi32(n, _mm256_set1_epi32(127)), 23);
    return _mm256_mul_ps(y, _mm256_castsi256_ps(n));
}

// erfc(|z|) with z >= 0 via the rational approximation of Abramowitz & Stegun
// 7.1.26 (abs. error <= 1.5e-7). `exp_neg_z2` is exp(-z^2), shared with the
// caller.
inline __m256 erfc_abs_ps(__m256 abs_z, __m256 exp_neg_z2) {
    const __m256 one = _mm256_set1_ps(1.0f);
    const __m256 t = _mm256_div_ps(one, _mm256_fmadd_ps(_mm256_set1_ps(0.3275911f), abs_z, one));
    __m256 poly = _mm256_set1_ps(1.061405429f);
    poly = _mm256_fmadd_ps(poly, t, _mm256_set1_ps(-1.453152027f));
    poly = _mm256_fmadd_ps(poly, t, _mm256_set1_ps(1.421413741f));
    poly = _mm256_fmadd_ps(poly, t, _mm256_set1_ps(-0.284496736f));
    poly = _mm256_fmadd_ps(poly, t, _mm256_set1_ps(0.254829592f));
    return _mm256_mul_ps(_mm256_mul_ps(poly, t), exp_neg_z2);
}

// Phi(x) = 0.5 * erfc(-x / sqrt(2)); `exp_half_x2` receives exp(-x^2 / 2).
inline __m256 normal_cdf_ps(__m256 x, __m256& exp_half_x2) {
    const __m256 sign_bit = _mm256_set1_ps(-0.0f);
    const __m256 half = _mm256_set1_ps(0.5f);
    const __m256 z = _mm256_mul_ps(x, _mm256_set1_ps(0.70710678118654752f));
    const __m256 abs_z = _mm256_andnot_ps(sign_bit, z);
    exp_half_x2 = exp_ps(_mm256_sub_ps(_mm256_setzero_ps(), _mm256_mul_ps(z, z)));
    const __m256 tail = _mm256_mul_ps(half, erfc_abs_ps(abs_z, exp_half_x2));
    const __m256 negative = _mm256_cmp_ps(x, _mm256_setzero_ps(), _CMP_LT_OQ);
    return _mm256_blendv_ps(_mm256_sub_ps(_mm256_set1_ps(1.0f), tail), tail, negative);
}

void gelu_f32(std::size_t n, const float* x, float* y) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 xv = _mm256_loadu_ps(x + i);
        __m256 e;
        _mm256_storeu_ps(y + i, _mm256_mul_ps(xv, normal_cdf_ps(xv, e)));
    }
    scalar_kernels<float>().gelu(n - i, x + i, y + i);
}

void gelu_backward_f32(std::size_t n, const float* x, const float* dy, float* dx) {
    const __m256 inv_sqrt2pi = _mm256_set1_ps(0.398942280401432678f);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 xv = _mm256_loadu_ps(x + i);
        __m256 e;
        const __m256 cdf = normal_cdf_ps(xv, e);
        const __m256 deriv = _mm256_fmadd_ps(_mm256_mul_ps(xv, inv_sqrt2pi), e, cdf);
        _mm256_storeu_ps(dx + i, _mm256_fmadd_ps(_mm256_loadu_ps(dy + i), deriv, _mm256_loadu_ps(dx + i)));
    }
    scalar_kernels<float>().gelu_backward(n - i, x + i, dy + i, dx + i);
}

const KernelTable<float> kFloatTable{
    Isa::avx2,  &gemm_nn<float>,    &gemm_nt<float>, &gemm_tn<float>,
    &gelu_f32,  &gelu_backward_f32, &axpy<float>,    &dot<float>,
};

// No vector erf for doubles: the gradient-check path wants the exact form.
void gelu_f64(std::size_t n, const double* x, double* y) { scalar_kernels<double>().gelu(n, x, y); }
void gelu_backward_f64(std::size_t n, const double* x, const double* dy, double* dx) {
    scalar_kernels<double>().gelu_backward(n, x, dy, dx);
}

const KernelTable<double> kDoubleTable{
    Isa::avx2, &gemm_nn<double>,   &gemm_nt<double>, &gemm_tn<double>,
    &gelu_f64, &gelu_backward_f64, &axpy<double>,    &dot<double>,
};

}  // namespace

const KernelTable<float>* avx2_table_f32() { return &kFloatTable; }
const KernelTable<double>* avx2_table_f64() { return &kDoubleTable; }

}  // namespace rematch::kernels
