// Copyright (c) 2026 speclab authors
// SPDX-License-Identifier: Apache-2.0
//
// Throughput check for the matrix kernels the training loop leans on.
// Prints GFLOP/s per kernel and shape; no correctness checks here.

#include <chrono>
#include <cstdio>
#include <vector>

#include "speclab/linalg.hpp"

using speclab::linalg::Rng;

namespace {

using clock_type = std::chrono::steady_clock;

template <typename T>
std::vector<T> random_buffer(Rng& rng, size_t n) {
  std::vector<T> v(n);
  for (T& x : v) x = static_cast<T>(rng.next_normal());
  return v;
}

// Runs fn repeatedly until ~0.3s elapsed, returns GFLOP/s.
template <typename F>
double measure(double flops_per_call, F&& fn) {
  fn();  // warm up
  int reps = 0;
  auto start = clock_type::now();
  double elapsed = 0.0;
  while (elapsed < 0.3) {
    fn();
    ++reps;
    elapsed = std::chrono::duration<double>(clock_type::now() - start).count();
  }
  return flops_per_call * reps / elapsed / 1e9;
}

template <typename T>
void bench_gemms(const char* label, int m, int n, int k) {
  Rng rng(99);
  std::vector<T> a = random_buffer<T>(rng, static_cast<size_t>(m) * k);
  std::vector<T> b = random_buffer<T>(rng, static_cast<size_t>(k) * n);
  std::vector<T> c(static_cast<size_t>(m) * n);
  double flops = 2.0 * m * n * k;

  double nn = measure(flops, [&] {
    speclab::linalg::gemm_nn<T>(m, n, k, a.data(), k, b.data(), n, c.data(), n, false);
  });
  // nt: b holds n x k.
  std::vector<T> bt = random_buffer<T>(rng, static_cast<size_t>(n) * k);
  double nt = measure(flops, [&] {
    speclab::linalg::gemm_nt<T>(m, n, k, a.data(), k, bt.data(), k, c.data(), n, false);
  });
  // tn: a holds k x m.
  std::vector<T> at = random_buffer<T>(rng, static_cast<size_t>(k) * m);
  double tn = measure(flops, [&] {
    speclab::linalg::gemm_tn<T>(m, n, k, at.data(), m, b.data(), n, c.data(), n, false);
  });
  std::printf("%-8s %4dx%4dx%4d   nn %7.2f   nt %7.2f   tn %7.2f  GFLOP/s\n",
              label, m, n, k, nn, nt, tn);
}

void bench_syrk(int rows, int d) {
  Rng rng(100);
  std::vector<double> h = random_buffer<double>(rng, static_cast<size_t>(rows) * d);
  std::vector<double> s(static_cast<size_t>(d) * d, 0.0);
  double flops = static_cast<double>(rows) * d * (d + 1);  // upper triangle
  double rate = measure(flops, [&] {
    speclab::linalg::syrk_upper_acc(rows, d, h.data(), d, s.data(), d);
  });
  std::printf("syrk_f64 %5d rows, d=%4d   %7.2f GFLOP/s\n", rows, d, rate);
}

}  // namespace

int main() {
  std::printf("kernel throughput (single thread)\n");
  const int shapes[][3] = {{256, 256, 256}, {512, 512, 512}, {64, 1024, 256}, {256, 256, 1024}};
  for (const auto& s : shapes) bench_gemms<float>("f32", s[0], s[1], s[2]);
  bench_gemms<double>("f64", 256, 256, 256);
  bench_gemms<double>("f64", 512, 512, 512);
  bench_syrk(4096, 128);
  bench_syrk(4096, 512);
  return 0;
}
