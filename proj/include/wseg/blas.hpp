#pragma once

#include <cblas.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <string>
#include <thread>

extern "C" {
void openblas_set_num_threads(int);
char* openblas_get_corename(void);
}

namespace wseg::blas {

namespace detail {

inline bool cpuinfo_model_unknown() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  bool saw_model = false;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      saw_model = true;
      if (line.find("unknown") == std::string::npos) return false;
    }
  }
  return true;  // no readable model name, or every entry says "unknown"
}

inline int& thread_count_ref() {
  static int n = 0;
  return n;
}

inline void init_once() {
  static std::once_flag flag;
  std::call_once(flag, [] {
    // OpenBLAS picks its kernel set from the CPU model string. Virtualised
    // hosts that mask the model make it fall back to a pre-AVX generic
    // target, which is several times slower than the AVX2/AVX-512 kernels
    // this CPU can actually run. Only step in when the model is masked and
    // nothing was requested explicitly; must happen before the first call
    // into the library.
#if defined(__x86_64__)
    if (std::getenv("OPENBLAS_CORETYPE") == nullptr && cpuinfo_model_unknown()) {
      if (__builtin_cpu_supports("avx512f")) {
        setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
      } else if (__builtin_cpu_supports("avx2")) {
        setenv("OPENBLAS_CORETYPE", "HASWELL", 1);
      }
    }
#endif
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (const char* env = std::getenv("WSEG_THREADS")) {
      int cap = std::atoi(env);
      if (cap >= 1) n = std::min(n, cap);
    }
    n = std::clamp(n, 1, 64);
    thread_count_ref() = n;
    openblas_set_num_threads(n);
  });
}

}  // namespace detail

inline void init() { detail::init_once(); }

inline int threads() {
  detail::init_once();
  return detail::thread_count_ref();
}

inline void set_threads(int n) {
  detail::init_once();
  n = std::clamp(n, 1, 64);
  detail::thread_count_ref() = n;
  openblas_set_num_threads(n);
}

inline const char* core_name() {
  detail::init_once();
  return openblas_get_corename();
}

/// C[M,N] = A[M,K] * B[K,N] + beta*C, all row-major.
inline void gemm_nn(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c,
                    float beta = 0.0f) {
  detail::init_once();
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0f, a, static_cast<int>(k), b, static_cast<int>(n), beta, c,
              static_cast<int>(n));
}

/// C[M,N] = A[M,K] * B[N,K]^T + beta*C, all row-major.
inline void gemm_nt(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c,
                    float beta = 0.0f) {
  detail::init_once();
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0f, a, static_cast<int>(k), b, static_cast<int>(k), beta, c,
              static_cast<int>(n));
}

/// C[M,N] = A[K,M]^T * B[K,N] + beta*C, all row-major.
inline void gemm_tn(int64_t m, int64_t n, int64_t k, const float* a, const float* b, float* c,
                    float beta = 0.0f) {
  detail::init_once();
  cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0f, a, static_cast<int>(m), b, static_cast<int>(n), beta, c,
              static_cast<int>(n));
}

}  // namespace wseg::blas
