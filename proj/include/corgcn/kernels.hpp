#pragma once

#include <cstddef>

namespace corgcn::kernels {

// out (m-by-n) += or = a (m-by-k) * b (k-by-n), row-major.
void matmul(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate = false);

// out (m-by-n) = a (m-by-k) * b^T where b is n-by-k, row-major.
void matmul_nt(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate = false);

// out (k-by-n) = a^T * g where a is m-by-k and g is m-by-n.
void matmul_tn(const double* a, const double* g, double* out, std::size_t m, std::size_t k,
               std::size_t n, bool accumulate = false);

}  // namespace corgcn::kernels
