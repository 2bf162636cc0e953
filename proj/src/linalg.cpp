// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#include "speclab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <type_traits>
#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define SPECLAB_SIMD 1
#endif

namespace speclab::linalg {

// ---------------------------------------------------------------- Rng

uint64_t Rng::next_u64() {
  state_ += 0x9E3779B97F4A7C15ull;
  uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double Rng::next_uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::next_normal() {
  if (have_cached_) {
    have_cached_ = false;
    return cached_;
  }
  // u1 in (0, 1] so the log is finite.
  double u1 = 1.0 - next_uniform();
  double u2 = next_uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 6.283185307179586476925286766559 * u2;
  cached_ = r * std::sin(a);
  have_cached_ = true;
  return r * std::cos(a);
}

uint64_t Rng::next_below(uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("Rng::next_below: bound must be > 0");
  uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  for (;;) {
    uint64_t v = next_u64();
    if (v < limit) return v % bound;
  }
}

// ---------------------------------------------------------------- kernels

namespace {

#ifdef SPECLAB_SIMD
template <class T>
struct VT;

#if defined(__AVX512F__)

// 512-bit lanes. The reduce intrinsics expand to a fixed shuffle tree, so
// dot-product results stay deterministic for a given binary.
template <>
struct VT<float> {
  using V = __m512;
  static constexpr int W = 16;
  static V load(const float* p) { return _mm512_loadu_ps(p); }
  static void store(float* p, V v) { _mm512_storeu_ps(p, v); }
  static V zero() { return _mm512_setzero_ps(); }
  static V bcast(float x) { return _mm512_set1_ps(x); }
  static V fma(V a, V b, V c) { return _mm512_fmadd_ps(a, b, c); }
  static V add(V a, V b) { return _mm512_add_ps(a, b); }
  static float hsum(V v) { return _mm512_reduce_add_ps(v); }
};

template <>
struct VT<double> {
  using V = __m512d;
  static constexpr int W = 8;
  static V load(const double* p) { return _mm512_loadu_pd(p); }
  static void store(double* p, V v) { _mm512_storeu_pd(p, v); }
  static V zero() { return _mm512_setzero_pd(); }
  static V bcast(double x) { return _mm512_set1_pd(x); }
  static V fma(V a, V b, V c) { return _mm512_fmadd_pd(a, b, c); }
  static V add(V a, V b) { return _mm512_add_pd(a, b); }
  static double hsum(V v) { return _mm512_reduce_add_pd(v); }
};

#else  // AVX2 + FMA

template <>
struct VT<float> {
  using V = __m256;
  static constexpr int W = 8;
  static V load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, V v) { _mm256_storeu_ps(p, v); }
  static V zero() { return _mm256_setzero_ps(); }
  static V bcast(float x) { return _mm256_set1_ps(x); }
  static V fma(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  static V add(V a, V b) { return _mm256_add_ps(a, b); }
  static float hsum(V v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 sh = _mm_movehl_ps(lo, lo);
    lo = _mm_add_ps(lo, sh);
    sh = _mm_shuffle_ps(lo, lo, 0x1);
    lo = _mm_add_ss(lo, sh);
    return _mm_cvtss_f32(lo);
  }
};

template <>
struct VT<double> {
  using V = __m256d;
  static constexpr int W = 4;
  static V load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, V v) { _mm256_storeu_pd(p, v); }
  static V zero() { return _mm256_setzero_pd(); }
  static V bcast(double x) { return _mm256_set1_pd(x); }
  static V fma(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  static V add(V a, V b) { return _mm256_add_pd(a, b); }
  static double hsum(V v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    lo = _mm_add_sd(lo, sh);
    return _mm_cvtsd_f64(lo);
  }
};

#endif  // __AVX512F__

// Shared body for nn (trans_a = false) and tn (trans_a = true): broadcasts of
// A against row panels of B. Column panels of 4, 2, then 1 vector, each run
// 4 rows deep so the FMA chains stay independent even when n is a single
// vector wide; every c[i][j] still accumulates over t in order.
template <class T, bool trans_a>
void gemm_bcast_simd(int m, int n, int k, const T* a, int lda, const T* b,
                     int ldb, T* c, int ldc, bool acc) {
  using U = VT<T>;
  using V = typename U::V;
  constexpr int W = U::W;
  constexpr int IB = 4;

  auto aval = [&](int row, int t) -> T {
    return trans_a ? a[static_cast<size_t>(t) * lda + row]
                   : a[static_cast<size_t>(row) * lda + t];
  };

  auto panel = [&](int j0, auto jv_tag) {
    constexpr int JV = decltype(jv_tag)::value;
    int i0 = 0;
    for (; i0 + IB <= m; i0 += IB) {
      V accv[IB][JV];
      for (int r = 0; r < IB; ++r)
        for (int q = 0; q < JV; ++q)
          accv[r][q] = acc ? U::load(c + static_cast<size_t>(i0 + r) * ldc + j0 + q * W)
                           : U::zero();
      for (int t = 0; t < k; ++t) {
        const T* brow = b + static_cast<size_t>(t) * ldb + j0;
        V bv[JV];
        for (int q = 0; q < JV; ++q) bv[q] = U::load(brow + q * W);
        for (int r = 0; r < IB; ++r) {
          V av = U::bcast(aval(i0 + r, t));
          for (int q = 0; q < JV; ++q) accv[r][q] = U::fma(av, bv[q], accv[r][q]);
        }
      }
      for (int r = 0; r < IB; ++r)
        for (int q = 0; q < JV; ++q)
          U::store(c + static_cast<size_t>(i0 + r) * ldc + j0 + q * W, accv[r][q]);
    }
    for (; i0 < m; ++i0) {
      V accv[JV];
      for (int q = 0; q < JV; ++q)
        accv[q] = acc ? U::load(c + static_cast<size_t>(i0) * ldc + j0 + q * W) : U::zero();
      for (int t = 0; t < k; ++t) {
        const T* brow = b + static_cast<size_t>(t) * ldb + j0;
        V av = U::bcast(aval(i0, t));
        for (int q = 0; q < JV; ++q)
          accv[q] = U::fma(av, U::load(brow + q * W), accv[q]);
      }
      for (int q = 0; q < JV; ++q)
        U::store(c + static_cast<size_t>(i0) * ldc + j0 + q * W, accv[q]);
    }
  };

  int j0 = 0;
  for (; j0 + 4 * W <= n; j0 += 4 * W) panel(j0, std::integral_constant<int, 4>{});
  for (; j0 + 2 * W <= n; j0 += 2 * W) panel(j0, std::integral_constant<int, 2>{});
  for (; j0 + W <= n; j0 += W) panel(j0, std::integral_constant<int, 1>{});
  // Scalar tail.
  for (; j0 < n; ++j0) {
    for (int i = 0; i < m; ++i) {
      T s = acc ? c[static_cast<size_t>(i) * ldc + j0] : T(0);
      for (int t = 0; t < k; ++t) s += aval(i, t) * b[static_cast<size_t>(t) * ldb + j0];
      c[static_cast<size_t>(i) * ldc + j0] = s;
    }
  }
}

// nt dot-product variant for outputs narrower than one vector, where the
// packed form below would degenerate to its scalar tail: vectorize over k
// with a 4 x 2 tile of horizontal reductions instead.
template <class T>
void gemm_nt_dot_simd(int m, int n, int k, const T* a, int lda, const T* b,
                      int ldb, T* c, int ldc, bool acc) {
  using U = VT<T>;
  using V = typename U::V;
  constexpr int W = U::W;
  const int kv = k - k % W;

  int i0 = 0;
  for (; i0 + 4 <= m; i0 += 4) {
    const T* a0 = a + static_cast<size_t>(i0) * lda;
    const T* a1 = a0 + lda;
    const T* a2 = a1 + lda;
    const T* a3 = a2 + lda;
    int j0 = 0;
    for (; j0 + 2 <= n; j0 += 2) {
      const T* b0 = b + static_cast<size_t>(j0) * ldb;
      const T* b1 = b0 + ldb;
      V s00 = U::zero(), s01 = U::zero(), s10 = U::zero(), s11 = U::zero();
      V s20 = U::zero(), s21 = U::zero(), s30 = U::zero(), s31 = U::zero();
      for (int t = 0; t < kv; t += W) {
        V vb0 = U::load(b0 + t), vb1 = U::load(b1 + t);
        V va = U::load(a0 + t);
        s00 = U::fma(va, vb0, s00);
        s01 = U::fma(va, vb1, s01);
        va = U::load(a1 + t);
        s10 = U::fma(va, vb0, s10);
        s11 = U::fma(va, vb1, s11);
        va = U::load(a2 + t);
        s20 = U::fma(va, vb0, s20);
        s21 = U::fma(va, vb1, s21);
        va = U::load(a3 + t);
        s30 = U::fma(va, vb0, s30);
        s31 = U::fma(va, vb1, s31);
      }
      T d00 = U::hsum(s00), d01 = U::hsum(s01), d10 = U::hsum(s10), d11 = U::hsum(s11);
      T d20 = U::hsum(s20), d21 = U::hsum(s21), d30 = U::hsum(s30), d31 = U::hsum(s31);
      for (int t = kv; t < k; ++t) {
        d00 += a0[t] * b0[t];
        d01 += a0[t] * b1[t];
        d10 += a1[t] * b0[t];
        d11 += a1[t] * b1[t];
        d20 += a2[t] * b0[t];
        d21 += a2[t] * b1[t];
        d30 += a3[t] * b0[t];
        d31 += a3[t] * b1[t];
      }
      T* c0 = c + static_cast<size_t>(i0) * ldc + j0;
      if (acc) {
        c0[0] += d00;
        c0[1] += d01;
        c0[ldc] += d10;
        c0[ldc + 1] += d11;
        c0[2 * ldc] += d20;
        c0[2 * ldc + 1] += d21;
        c0[3 * ldc] += d30;
        c0[3 * ldc + 1] += d31;
      } else {
        c0[0] = d00;
        c0[1] = d01;
        c0[ldc] = d10;
        c0[ldc + 1] = d11;
        c0[2 * ldc] = d20;
        c0[2 * ldc + 1] = d21;
        c0[3 * ldc] = d30;
        c0[3 * ldc + 1] = d31;
      }
    }
    for (; j0 < n; ++j0) {
      const T* b0 = b + static_cast<size_t>(j0) * ldb;
      const T* rows[4] = {a0, a1, a2, a3};
      for (int r = 0; r < 4; ++r) {
        V s = U::zero();
        for (int t = 0; t < kv; t += W) s = U::fma(U::load(rows[r] + t), U::load(b0 + t), s);
        T d = U::hsum(s);
        for (int t = kv; t < k; ++t) d += rows[r][t] * b0[t];
        T* cp = c + static_cast<size_t>(i0 + r) * ldc + j0;
        *cp = acc ? *cp + d : d;
      }
    }
  }
  for (; i0 < m; ++i0) {
    const T* a0 = a + static_cast<size_t>(i0) * lda;
    for (int j0 = 0; j0 < n; ++j0) {
      const T* b0 = b + static_cast<size_t>(j0) * ldb;
      V s = U::zero();
      for (int t = 0; t < kv; t += W) s = U::fma(U::load(a0 + t), U::load(b0 + t), s);
      T d = U::hsum(s);
      for (int t = kv; t < k; ++t) d += a0[t] * b0[t];
      T* cp = c + static_cast<size_t>(i0) * ldc + j0;
      *cp = acc ? *cp + d : d;
    }
  }
}
#endif  // SPECLAB_SIMD

template <class T, bool trans_a>
void gemm_bcast_generic(int m, int n, int k, const T* a, int lda, const T* b,
                        int ldb, T* c, int ldc, bool acc) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<size_t>(i) * ldc;
    if (!acc)
      for (int j = 0; j < n; ++j) crow[j] = T(0);
    for (int t = 0; t < k; ++t) {
      T av = trans_a ? a[static_cast<size_t>(t) * lda + i]
                     : a[static_cast<size_t>(i) * lda + t];
      const T* brow = b + static_cast<size_t>(t) * ldb;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void gemm_nt_generic(int m, int n, int k, const T* a, int lda, const T* b,
                     int ldb, T* c, int ldc, bool acc) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * lda;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<size_t>(j) * ldb;
      T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      int t = 0;
      for (; t + 4 <= k; t += 4) {
        s0 += arow[t] * brow[t];
        s1 += arow[t + 1] * brow[t + 1];
        s2 += arow[t + 2] * brow[t + 2];
        s3 += arow[t + 3] * brow[t + 3];
      }
      T d = (s0 + s1) + (s2 + s3);
      for (; t < k; ++t) d += arow[t] * brow[t];
      T* cp = c + static_cast<size_t>(i) * ldc + j;
      *cp = acc ? *cp + d : d;
    }
  }
}

}  // namespace

// nt: pack B transposed once, then reuse the broadcast panel body. Row-wide
// FMA streams beat hsum-reduced dot products at every shape the model emits,
// and each c[i][j] accumulates over t in order, same as the other kernels.
template <class T>
void gemm_nt(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
             T* c, int ldc, bool accumulate) {
#ifdef SPECLAB_SIMD
  if (n < VT<T>::W) {
    gemm_nt_dot_simd<T>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
    return;
  }
  std::vector<T> bt(static_cast<size_t>(k) * n);
  for (int j = 0; j < n; ++j) {
    const T* brow = b + static_cast<size_t>(j) * ldb;
    for (int t = 0; t < k; ++t) bt[static_cast<size_t>(t) * n + j] = brow[t];
  }
  gemm_bcast_simd<T, false>(m, n, k, a, lda, bt.data(), n, c, ldc, accumulate);
#else
  gemm_nt_generic<T>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
#endif
}

template <class T>
void gemm_nn(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
             T* c, int ldc, bool accumulate) {
#ifdef SPECLAB_SIMD
  gemm_bcast_simd<T, false>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
#else
  gemm_bcast_generic<T, false>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
#endif
}

template <class T>
void gemm_tn(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
             T* c, int ldc, bool accumulate) {
#ifdef SPECLAB_SIMD
  gemm_bcast_simd<T, true>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
#else
  gemm_bcast_generic<T, true>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
#endif
}

template void gemm_nt<float>(int, int, int, const float*, int, const float*, int, float*, int, bool);
template void gemm_nt<double>(int, int, int, const double*, int, const double*, int, double*, int, bool);
template void gemm_nn<float>(int, int, int, const float*, int, const float*, int, float*, int, bool);
template void gemm_nn<double>(int, int, int, const double*, int, const double*, int, double*, int, bool);
template void gemm_tn<float>(int, int, int, const float*, int, const float*, int, float*, int, bool);
template void gemm_tn<double>(int, int, int, const double*, int, const double*, int, double*, int, bool);

void syrk_upper_acc(int n, int d, const double* h, int ldh, double* s, int lds) {
  constexpr int IB = 4;
  constexpr int TB = 256;  // row chunk; keeps the active H panel in L2
#ifdef SPECLAB_SIMD
  using U = VT<double>;
  using V = U::V;
  constexpr int W = U::W;
  constexpr int JV = 4;
#endif
  for (int t0 = 0; t0 < n; t0 += TB) {
    const int tb = std::min(TB, n - t0);
    const double* hc = h + static_cast<size_t>(t0) * ldh;
    for (int i0 = 0; i0 < d; i0 += IB) {
      const int ib = std::min(IB, d - i0);
      // Pack the stripe's columns once so the inner loops read contiguously.
      alignas(32) double ap[IB][TB];
      for (int t = 0; t < tb; ++t) {
        const double* hrow = hc + static_cast<size_t>(t) * ldh + i0;
        for (int r = 0; r < ib; ++r) ap[r][t] = hrow[r];
      }
      // Triangular corner of the stripe.
      for (int r = 0; r < ib; ++r)
        for (int j = r; j < ib; ++j) {
          double acc = 0.0;
          for (int t = 0; t < tb; ++t) acc += ap[r][t] * ap[j][t];
          s[static_cast<size_t>(i0 + r) * lds + i0 + j] += acc;
        }
      int j0 = i0 + ib;
#ifdef SPECLAB_SIMD
      if (ib == IB) {
        for (; j0 + JV * W <= d; j0 += JV * W) {
          V accv[IB][JV];
          for (int r = 0; r < IB; ++r)
            for (int q = 0; q < JV; ++q) accv[r][q] = U::zero();
          for (int t = 0; t < tb; ++t) {
            const double* hrow = hc + static_cast<size_t>(t) * ldh + j0;
            V b0 = U::load(hrow);
            V b1 = U::load(hrow + W);
            V b2 = U::load(hrow + 2 * W);
            V b3 = U::load(hrow + 3 * W);
            for (int r = 0; r < IB; ++r) {
              V av = U::bcast(ap[r][t]);
              accv[r][0] = U::fma(av, b0, accv[r][0]);
              accv[r][1] = U::fma(av, b1, accv[r][1]);
              accv[r][2] = U::fma(av, b2, accv[r][2]);
              accv[r][3] = U::fma(av, b3, accv[r][3]);
            }
          }
          for (int r = 0; r < IB; ++r) {
            double* srow = s + static_cast<size_t>(i0 + r) * lds + j0;
            for (int q = 0; q < JV; ++q)
              U::store(srow + q * W, U::add(U::load(srow + q * W), accv[r][q]));
          }
        }
        for (; j0 + W <= d; j0 += W) {
          V accv[IB] = {U::zero(), U::zero(), U::zero(), U::zero()};
          for (int t = 0; t < tb; ++t) {
            V b0 = U::load(hc + static_cast<size_t>(t) * ldh + j0);
            for (int r = 0; r < IB; ++r) accv[r] = U::fma(U::bcast(ap[r][t]), b0, accv[r]);
          }
          for (int r = 0; r < IB; ++r) {
            double* sp = s + static_cast<size_t>(i0 + r) * lds + j0;
            U::store(sp, U::add(U::load(sp), accv[r]));
          }
        }
      }
#endif
      for (; j0 < d; ++j0) {
        for (int r = 0; r < ib; ++r) {
          double acc = 0.0;
          for (int t = 0; t < tb; ++t)
            acc += ap[r][t] * hc[static_cast<size_t>(t) * ldh + j0];
          s[static_cast<size_t>(i0 + r) * lds + j0] += acc;
        }
      }
    }
  }
}

// ---------------------------------------------------------------- matmul

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows)
    throw std::invalid_argument("matmul: inner dimensions differ");
  Matrix c(a.rows, b.cols);
  gemm_nn<double>(a.rows, b.cols, a.cols, a.d.data(), a.cols, b.d.data(),
                  b.cols, c.d.data(), c.cols, false);
  return c;
}

// ---------------------------------------------------------------- eig

namespace {

void require_symmetric(const Matrix& a, const char* who) {
  if (a.rows != a.cols) throw std::invalid_argument(std::string(who) + ": matrix not square");
  double scale = 0.0;
  for (double v : a.d) scale = std::max(scale, std::abs(v));
  double tol = 1e-10 * std::max(1.0, scale);
  for (int i = 0; i < a.rows; ++i)
    for (int j = i + 1; j < a.cols; ++j)
      if (std::abs(a.at(i, j) - a.at(j, i)) > tol)
        throw std::invalid_argument(std::string(who) + ": matrix not symmetric");
}

// Flip eigenvector columns so the first entry with |v| > 1e-12 is positive.
void canonical_signs(Matrix& vectors) {
  for (int j = 0; j < vectors.cols; ++j) {
    double lead = 0.0;
    for (int i = 0; i < vectors.rows; ++i) {
      if (std::abs(vectors.at(i, j)) > 1e-12) {
        lead = vectors.at(i, j);
        break;
      }
    }
    if (lead < 0.0)
      for (int i = 0; i < vectors.rows; ++i) vectors.at(i, j) = -vectors.at(i, j);
  }
}

}  // namespace

EigResult symmetric_eig(const Matrix& input) {
  require_symmetric(input, "symmetric_eig");
  const int n = input.rows;
  EigResult out;
  if (n == 0) return out;

  Matrix a = input;
  // Eigenvectors are accumulated transposed so rotations touch contiguous rows.
  Matrix vt(n, n);
  for (int i = 0; i < n; ++i) vt.at(i, i) = 1.0;

  double frob2 = 0.0;
  for (double v : a.d) frob2 += v * v;

  std::vector<double> rp(n), rq(n);
  const int max_sweeps = 100;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off2 = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off2 += a.at(p, q) * a.at(p, q);
    if (off2 <= 1e-28 * frob2 || off2 == 0.0) break;

    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double apq = a.at(p, q);
        if (std::abs(apq) < 1e-300) continue;
        double app = a.at(p, p), aqq = a.at(q, q);
        double theta = (aqq - app) / (2.0 * apq);
        double t = (theta >= 0.0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;

        const double* arp = a.row(p);
        const double* arq = a.row(q);
        for (int k = 0; k < n; ++k) {
          rp[k] = c * arp[k] - s * arq[k];
          rq[k] = s * arp[k] + c * arq[k];
        }
        rp[p] = app - t * apq;
        rq[q] = aqq + t * apq;
        rp[q] = 0.0;
        rq[p] = 0.0;
        std::memcpy(a.row(p), rp.data(), sizeof(double) * n);
        std::memcpy(a.row(q), rq.data(), sizeof(double) * n);
        for (int k = 0; k < n; ++k) {
          a.at(k, p) = rp[k];
          a.at(k, q) = rq[k];
        }

        double* vp = vt.row(p);
        double* vq = vt.row(q);
        for (int k = 0; k < n; ++k) {
          double x = vp[k], y = vq[k];
          vp[k] = c * x - s * y;
          vq[k] = s * x + c * y;
        }
      }
    }
  }

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return a.at(x, x) > a.at(y, y); });

  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (int j = 0; j < n; ++j) {
    out.values[j] = a.at(order[j], order[j]);
    for (int i = 0; i < n; ++i) out.vectors.at(i, j) = vt.at(order[j], i);
  }
  canonical_signs(out.vectors);
  return out;
}

std::vector<double> symmetric_eigenvalues(const Matrix& input) {
  require_symmetric(input, "symmetric_eigenvalues");
  const int n = input.rows;
  if (n == 0) return {};
  if (n == 1) return {input.at(0, 0)};

  // Householder reduction to tridiagonal form (values only).
  Matrix a = input;
  std::vector<double> d(n, 0.0), e(n, 0.0);
  for (int i = n - 1; i >= 1; --i) {
    int l = i - 1;
    double h = 0.0;
    if (l > 0) {
      double scale = 0.0;
      for (int k = 0; k <= l; ++k) scale += std::abs(a.at(i, k));
      if (scale == 0.0) {
        e[i] = a.at(i, l);
      } else {
        for (int k = 0; k <= l; ++k) {
          a.at(i, k) /= scale;
          h += a.at(i, k) * a.at(i, k);
        }
        double f = a.at(i, l);
        double g = (f >= 0.0) ? -std::sqrt(h) : std::sqrt(h);
        e[i] = scale * g;
        h -= f * g;
        a.at(i, l) = f - g;
        f = 0.0;
        for (int j = 0; j <= l; ++j) {
          g = 0.0;
          for (int k = 0; k <= j; ++k) g += a.at(j, k) * a.at(i, k);
          for (int k = j + 1; k <= l; ++k) g += a.at(k, j) * a.at(i, k);
          e[j] = g / h;
          f += e[j] * a.at(i, j);
        }
        double hh = f / (h + h);
        for (int j = 0; j <= l; ++j) {
          f = a.at(i, j);
          e[j] = g = e[j] - hh * f;
          for (int k = 0; k <= j; ++k)
            a.at(j, k) -= f * e[k] + g * a.at(i, k);
        }
      }
    } else {
      e[i] = a.at(i, l);
    }
    d[i] = h;
  }
  for (int i = 0; i < n; ++i) d[i] = a.at(i, i);

  // Implicit-shift QL on the tridiagonal (d, e).
  for (int i = 1; i < n; ++i) e[i - 1] = e[i];
  e[n - 1] = 0.0;
  const double eps = std::numeric_limits<double>::epsilon();
  for (int l = 0; l < n; ++l) {
    int iter = 0;
    int m;
    do {
      for (m = l; m < n - 1; ++m) {
        double dd = std::abs(d[m]) + std::abs(d[m + 1]);
        if (std::abs(e[m]) <= eps * dd) break;
      }
      if (m != l) {
        if (iter++ == 60)
          throw std::runtime_error("symmetric_eigenvalues: QL failed to converge");
        double g = (d[l + 1] - d[l]) / (2.0 * e[l]);
        double r = std::hypot(g, 1.0);
        g = d[m] - d[l] + e[l] / (g + std::copysign(r, g));
        double s = 1.0, c = 1.0, p = 0.0;
        int i;
        for (i = m - 1; i >= l; --i) {
          double f = s * e[i];
          double b = c * e[i];
          r = std::hypot(f, g);
          e[i + 1] = r;
          if (r == 0.0) {
            d[i + 1] -= p;
            e[m] = 0.0;
            break;
          }
          s = f / r;
          c = g / r;
          g = d[i + 1] - p;
          r = (d[i] - g) * s + 2.0 * c * b;
          p = s * r;
          d[i + 1] = g + p;
          g = c * r - b;
        }
        if (r == 0.0 && i >= l) continue;
        d[l] -= p;
        e[l] = g;
        e[m] = 0.0;
      }
    } while (m != l);
  }

  std::sort(d.begin(), d.end(), std::greater<double>());
  return d;
}

// ---------------------------------------------------------------- QR

QrResult reduced_qr(const Matrix& a) {
  const int m = a.rows, n = a.cols;
  if (n == 0 || m < n)
    throw std::invalid_argument("reduced_qr: need rows >= cols >= 1");

  Matrix w = a;                      // working copy, becomes R in the top block
  Matrix v(m, n);                    // Householder vectors, column j in rows j..m-1
  std::vector<double> beta(n, 0.0);

  for (int j = 0; j < n; ++j) {
    double norm2 = 0.0;
    for (int i = j; i < m; ++i) norm2 += w.at(i, j) * w.at(i, j);
    double norm = std::sqrt(norm2);
    if (norm <= 1e-300) {
      // Column already annihilated (rank deficiency): no reflector.
      for (int i = j; i < m; ++i) w.at(i, j) = 0.0;
      continue;
    }
    double x0 = w.at(j, j);
    double alpha = (x0 >= 0.0) ? -norm : norm;
    double v0 = x0 - alpha;
    double vnorm2 = norm2 - x0 * x0 + v0 * v0;
    v.at(j, j) = v0;
    for (int i = j + 1; i < m; ++i) v.at(i, j) = w.at(i, j);
    beta[j] = 2.0 / vnorm2;

    for (int col = j; col < n; ++col) {
      double dot = 0.0;
      for (int i = j; i < m; ++i) dot += v.at(i, j) * w.at(i, col);
      double f = beta[j] * dot;
      for (int i = j; i < m; ++i) w.at(i, col) -= f * v.at(i, j);
    }
    w.at(j, j) = alpha;  // exact value; the loop above leaves roundoff
    for (int i = j + 1; i < m; ++i) w.at(i, j) = 0.0;
  }

  QrResult out;
  out.q = Matrix(m, n);
  for (int j = 0; j < n; ++j) out.q.at(j, j) = 1.0;
  for (int j = n - 1; j >= 0; --j) {
    if (beta[j] == 0.0) continue;
    for (int col = 0; col < n; ++col) {
      double dot = 0.0;
      for (int i = j; i < m; ++i) dot += v.at(i, j) * out.q.at(i, col);
      double f = beta[j] * dot;
      for (int i = j; i < m; ++i) out.q.at(i, col) -= f * v.at(i, j);
    }
  }

  out.r = Matrix(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) out.r.at(i, j) = w.at(i, j);

  // Canonical form: non-negative R diagonal.
  for (int j = 0; j < n; ++j) {
    if (out.r.at(j, j) < 0.0) {
      for (int k = j; k < n; ++k) out.r.at(j, k) = -out.r.at(j, k);
      for (int i = 0; i < m; ++i) out.q.at(i, j) = -out.q.at(i, j);
    }
  }
  return out;
}

}  // namespace speclab::linalg
