#include "corgcn/kernels.hpp"

#include <cstring>

namespace corgcn::kernels {

namespace {
constexpr std::size_t kParallelThreshold = 1u << 15;
}

void matmul(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
  if (!accumulate) std::memset(out, 0, m * n * sizeof(double));
  const bool par = m * k * n >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    double* out_row = out + i * n;
    const double* a_row = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a_row[l];
      if (av == 0.0) continue;
      const double* b_row = b + l * n;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += av * b_row[j];
    }
  }
}

void matmul_nt(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  const bool par = m * k * n >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    const double* a_row = a + i * k;
    double* out_row = out + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* b_row = b + j * k;
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += a_row[l] * b_row[l];
      if (accumulate) {
        out_row[j] += acc;
      } else {
        out_row[j] = acc;
      }
    }
  }
}

void matmul_tn(const double* a, const double* g, double* out, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate) {
  if (!accumulate) std::memset(out, 0, k * n * sizeof(double));
  const bool par = m * k * n >= kParallelThreshold;
  // Parallel over rows of the k-by-n output; each row sums over m independently.
#pragma omp parallel for schedule(static) if (par)
  for (long long jj = 0; jj < static_cast<long long>(k); ++jj) {
    const std::size_t j = static_cast<std::size_t>(jj);
    double* out_row = out + j * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[i * k + j];
      if (av == 0.0) continue;
      const double* g_row = g + i * n;
      for (std::size_t c = 0; c < n; ++c) out_row[c] += av * g_row[c];
    }
  }
}

}  // namespace corgcn::kernels
