// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace speclab::linalg {

// Dense row-major matrix, 64-bit. The training path works on raw float
// buffers through the gemm kernels below; everything spectral goes through
// Matrix in double precision.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> d;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return d[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return d[static_cast<size_t>(r) * cols + c]; }
  double* row(int r) { return d.data() + static_cast<size_t>(r) * cols; }
  const double* row(int r) const { return d.data() + static_cast<size_t>(r) * cols; }
  size_t size() const { return d.size(); }
};

// Deterministic splitmix64 generator. Identical seed gives an identical
// stream on every platform; no libc rand state is involved.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64();
  // Uniform in [0, 1), 53-bit resolution.
  double next_uniform();
  // Standard normal via Box-Muller; the second value is cached.
  double next_normal();
  // Uniform in [0, bound), unbiased via rejection. bound must be > 0.
  uint64_t next_below(uint64_t bound);

 private:
  uint64_t state_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

// C = A * B. Dimension mismatch throws.
Matrix matmul(const Matrix& a, const Matrix& b);

struct EigResult {
  std::vector<double> values;  // descending
  Matrix vectors;              // columns are eigenvectors, orthonormal
};

// Cyclic Jacobi for a symmetric matrix. Eigenvalues come back descending;
// each eigenvector's first entry of magnitude > tol is made positive so the
// decomposition is reproducible. Non-symmetric input throws.
EigResult symmetric_eig(const Matrix& a);

// Eigenvalues only (descending), via Householder tridiagonalization plus
// implicit-shift QL. Much faster than Jacobi for the covariance sizes the
// probe path produces; agrees with symmetric_eig to solver tolerance.
std::vector<double> symmetric_eigenvalues(const Matrix& a);

struct QrResult {
  Matrix q;  // m x n, orthonormal columns
  Matrix r;  // n x n upper triangular, non-negative diagonal
};

// Householder reduced QR for m >= n. Rank-deficient input still yields an
// orthonormal Q (the reflectors complete the basis deterministically).
QrResult reduced_qr(const Matrix& a);

// ---- raw kernels (float for the training path, double for probes) ----
// All kernels are single-threaded and accumulate each output element in a
// fixed k order, so results are bit-reproducible for a given binary.

// C[m x n] = A[m x k] * B[n x k]^T, i.e. dot products of A rows with B rows.
template <class T>
void gemm_nt(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
             T* c, int ldc, bool accumulate);

// C[m x n] = A[m x k] * B[k x n].
template <class T>
void gemm_nn(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
             T* c, int ldc, bool accumulate);

// C[m x n] = A[k x m]^T * B[k x n].
template <class T>
void gemm_tn(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
             T* c, int ldc, bool accumulate);

// S[d x d] upper triangle += H^T * H with H[n x d]. Rows of H are samples;
// the lower triangle of S is left untouched.
void syrk_upper_acc(int n, int d, const double* h, int ldh, double* s, int lds);

}  // namespace speclab::linalg
