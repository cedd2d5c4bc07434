#include "ttlab/blas.hpp"

#include <dlfcn.h>

#include <cstdlib>
#include <string>

namespace ttlab::blas {
namespace {

// cblas enums, kept local so no cblas header is needed.
constexpr int kRowMajor = 101;
constexpr int kNoTrans = 111;
constexpr int kTrans = 112;

using sgemm_fn = void (*)(int, int, int, int, int, int, float, const float*, int,
                          const float*, int, float, float*, int);
using dgemm_fn = void (*)(int, int, int, int, int, int, double, const double*, int,
                          const double*, int, double, double*, int);

struct Backend {
  sgemm_fn sgemm = nullptr;
  dgemm_fn dgemm = nullptr;
  std::string name = "builtin";
};

// OpenBLAS picks its kernel from CPUID at load time.  Under some hypervisors
// the model id is masked and it silently falls back to a generic kernel that
// is ~5x slower, so when the CPU advertises AVX-512 we pin a matching kernel
// via OPENBLAS_CORETYPE before the library initialises.  Explicit settings in
// the environment win (setenv overwrite=0).
void hint_coretype() {
#if defined(__x86_64__)
  if (__builtin_cpu_supports("avx512f") && __builtin_cpu_supports("avx512bw") &&
      __builtin_cpu_supports("avx512vl") && __builtin_cpu_supports("avx512dq")) {
    setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
  } else if (__builtin_cpu_supports("avx2")) {
    setenv("OPENBLAS_CORETYPE", "HASWELL", 0);
  }
#endif
}

Backend load_backend() {
  Backend b;
  hint_coretype();
  void* h = dlopen("libopenblas.so.0", RTLD_NOW | RTLD_LOCAL);
  if (!h) h = dlopen("libopenblas.so", RTLD_NOW | RTLD_LOCAL);
  if (!h) return b;
  auto sg = reinterpret_cast<sgemm_fn>(dlsym(h, "cblas_sgemm"));
  auto dg = reinterpret_cast<dgemm_fn>(dlsym(h, "cblas_dgemm"));
  if (!sg || !dg) return b;

  // Single-threaded unless TTLAB_BLAS_THREADS says otherwise: reproducible by
  // default, and thread fan-out is counterproductive at these matrix sizes.
  int threads = 1;
  if (const char* e = std::getenv("TTLAB_BLAS_THREADS")) {
    int v = std::atoi(e);
    if (v > 0) threads = v;
  }
  if (auto set_nt = reinterpret_cast<void (*)(int)>(dlsym(h, "openblas_set_num_threads"))) {
    set_nt(threads);
  }

  b.sgemm = sg;
  b.dgemm = dg;
  b.name = "openblas";
  if (auto corename = reinterpret_cast<char* (*)()>(dlsym(h, "openblas_get_corename"))) {
    b.name += std::string(":") + corename();
  }
  return b;
}

const Backend& backend() {
  static Backend b = load_backend();
  return b;
}

template <typename S>
void gemm_builtin(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
                  S alpha, const S* a, int64_t lda, const S* b, int64_t ldb,
                  S beta, S* c, int64_t ldc) {
  for (int64_t i = 0; i < m; ++i) {
    S* crow = c + i * ldc;
    if (beta == S(0)) {
      for (int64_t j = 0; j < n; ++j) crow[j] = S(0);
    } else if (beta != S(1)) {
      for (int64_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (int64_t p = 0; p < k; ++p) {
      S av = alpha * (trans_a ? a[p * lda + i] : a[i * lda + p]);
      if (av == S(0)) continue;
      if (!trans_b) {
        const S* brow = b + p * ldb;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (int64_t j = 0; j < n; ++j) crow[j] += av * b[j * ldb + p];
      }
    }
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          float alpha, const float* a, int64_t lda, const float* b, int64_t ldb,
          float beta, float* c, int64_t ldc) {
  if (m == 0 || n == 0) return;
  if (const auto& bk = backend(); bk.sgemm) {
    bk.sgemm(kRowMajor, trans_a ? kTrans : kNoTrans, trans_b ? kTrans : kNoTrans,
             static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha,
             a, static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
             static_cast<int>(ldc));
    return;
  }
  gemm_builtin(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          double alpha, const double* a, int64_t lda, const double* b, int64_t ldb,
          double beta, double* c, int64_t ldc) {
  if (m == 0 || n == 0) return;
  if (const auto& bk = backend(); bk.dgemm) {
    bk.dgemm(kRowMajor, trans_a ? kTrans : kNoTrans, trans_b ? kTrans : kNoTrans,
             static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha,
             a, static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
             static_cast<int>(ldc));
    return;
  }
  gemm_builtin(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

const char* backend_name() { return backend().name.c_str(); }

}  // namespace ttlab::blas
