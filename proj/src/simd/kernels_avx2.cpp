// AVX2 + FMA kernels. This translation unit is the only one compiled with
// -mavx2 -mfma; nothing here may be called unless isa_supported(Isa::Avx2).

#include <immintrin.h>

#include "vfa/simd/kernels.hpp"

namespace vfa::simd::detail {

namespace {

struct F32 {
  using T = float;
  using V = __m256;
  static constexpr std::size_t W = 8;
  static V zero() { return _mm256_setzero_ps(); }
  static V load(const T* p) { return _mm256_loadu_ps(p); }
  static void store(T* p, V v) { _mm256_storeu_ps(p, v); }
  static V set1(T v) { return _mm256_set1_ps(v); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  static V add(V a, V b) { return _mm256_add_ps(a, b); }
  static T hsum(V v) {
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

struct F64 {
  using T = double;
  using V = __m256d;
  static constexpr std::size_t W = 4;
  static V zero() { return _mm256_setzero_pd(); }
  static V load(const T* p) { return _mm256_loadu_pd(p); }
  static void store(T* p, V v) { _mm256_storeu_pd(p, v); }
  static V set1(T v) { return _mm256_set1_pd(v); }
  static V fmadd(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  static V add(V a, V b) { return _mm256_add_pd(a, b); }
  static T hsum(V v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d hi64 = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, hi64));
  }
};

// 4 rows x 2 vectors register block; k runs to completion inside the block.
template <typename S>
void gemm_avx2(std::size_t m, std::size_t n, std::size_t k, const typename S::T* a,
               std::size_t lda, const typename S::T* b, std::size_t ldb, typename S::T* c,
               std::size_t ldc) {
  using T = typename S::T;
  using V = typename S::V;
  constexpr std::size_t W = S::W;

  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const T* a0 = a + (i + 0) * lda;
    const T* a1 = a + (i + 1) * lda;
    const T* a2 = a + (i + 2) * lda;
    const T* a3 = a + (i + 3) * lda;
    T* c0 = c + (i + 0) * ldc;
    T* c1 = c + (i + 1) * ldc;
    T* c2 = c + (i + 2) * ldc;
    T* c3 = c + (i + 3) * ldc;
    std::size_t j = 0;
    for (; j + 2 * W <= n; j += 2 * W) {
      V r00 = S::load(c0 + j), r01 = S::load(c0 + j + W);
      V r10 = S::load(c1 + j), r11 = S::load(c1 + j + W);
      V r20 = S::load(c2 + j), r21 = S::load(c2 + j + W);
      V r30 = S::load(c3 + j), r31 = S::load(c3 + j + W);
      for (std::size_t p = 0; p < k; ++p) {
        const T* brow = b + p * ldb + j;
        const V b0 = S::load(brow);
        const V b1 = S::load(brow + W);
        V av = S::set1(a0[p]);
        r00 = S::fmadd(av, b0, r00);
        r01 = S::fmadd(av, b1, r01);
        av = S::set1(a1[p]);
        r10 = S::fmadd(av, b0, r10);
        r11 = S::fmadd(av, b1, r11);
        av = S::set1(a2[p]);
        r20 = S::fmadd(av, b0, r20);
        r21 = S::fmadd(av, b1, r21);
        av = S::set1(a3[p]);
        r30 = S::fmadd(av, b0, r30);
        r31 = S::fmadd(av, b1, r31);
      }
      S::store(c0 + j, r00);
      S::store(c0 + j + W, r01);
      S::store(c1 + j, r10);
      S::store(c1 + j + W, r11);
      S::store(c2 + j, r20);
      S::store(c2 + j + W, r21);
      S::store(c3 + j, r30);
      S::store(c3 + j + W, r31);
    }
    for (; j + W <= n; j += W) {
      V r0 = S::load(c0 + j), r1 = S::load(c1 + j), r2 = S::load(c2 + j), r3 = S::load(c3 + j);
      for (std::size_t p = 0; p < k; ++p) {
        const V bv = S::load(b + p * ldb + j);
        r0 = S::fmadd(S::set1(a0[p]), bv, r0);
        r1 = S::fmadd(S::set1(a1[p]), bv, r1);
        r2 = S::fmadd(S::set1(a2[p]), bv, r2);
        r3 = S::fmadd(S::set1(a3[p]), bv, r3);
      }
      S::store(c0 + j, r0);
      S::store(c1 + j, r1);
      S::store(c2 + j, r2);
      S::store(c3 + j, r3);
    }
    for (; j < n; ++j) {
      T s0 = c0[j], s1 = c1[j], s2 = c2[j], s3 = c3[j];
      for (std::size_t p = 0; p < k; ++p) {
        const T bv = b[p * ldb + j];
        s0 += a0[p] * bv;
        s1 += a1[p] * bv;
        s2 += a2[p] * bv;
        s3 += a3[p] * bv;
      }
      c0[j] = s0;
      c1[j] = s1;
      c2[j] = s2;
      c3[j] = s3;
    }
  }
  for (; i < m; ++i) {
    const T* arow = a + i * lda;
    T* crow = c + i * ldc;
    std::size_t j = 0;
    for (; j + W <= n; j += W) {
      V r = S::load(crow + j);
      for (std::size_t p = 0; p < k; ++p) r = S::fmadd(S::set1(arow[p]), S::load(b + p * ldb + j), r);
      S::store(crow + j, r);
    }
    for (; j < n; ++j) {
      T s = crow[j];
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * b[p * ldb + j];
      crow[j] = s;
    }
  }
}

template <typename S>
typename S::T dot_avx2(const typename S::T* x, const typename S::T* y, std::size_t n) {
  using T = typename S::T;
  using V = typename S::V;
  constexpr std::size_t W = S::W;
  V acc0 = S::zero(), acc1 = S::zero();
  std::size_t i = 0;
  for (; i + 2 * W <= n; i += 2 * W) {
    acc0 = S::fmadd(S::load(x + i), S::load(y + i), acc0);
    acc1 = S::fmadd(S::load(x + i + W), S::load(y + i + W), acc1);
  }
  for (; i + W <= n; i += W) acc0 = S::fmadd(S::load(x + i), S::load(y + i), acc0);
  T s = S::hsum(S::add(acc0, acc1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

template <typename S>
void axpy_avx2(typename S::T alpha, const typename S::T* x, typename S::T* y, std::size_t n) {
  using V = typename S::V;
  constexpr std::size_t W = S::W;
  const V av = S::set1(alpha);
  std::size_t i = 0;
  for (; i + W <= n; i += W) S::store(y + i, S::fmadd(av, S::load(x + i), S::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

template <typename T>
const KernelTable<T>* avx2_table();

template <>
const KernelTable<float>* avx2_table<float>() {
  static const KernelTable<float> table{&gemm_avx2<F32>, &dot_avx2<F32>, &axpy_avx2<F32>};
  return &table;
}

template <>
const KernelTable<double>* avx2_table<double>() {
  static const KernelTable<double> table{&gemm_avx2<F64>, &dot_avx2<F64>, &axpy_avx2<F64>};
  return &table;
}

}  // namespace vfa::simd::detail
