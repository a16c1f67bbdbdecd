#pragma once

#include <cstdint>

namespace wf::detail {

// Accumulating single-threaded kernels; callers zero-initialize c.
// Compiled in their own TU with reassociation enabled so the reduction
// loops vectorize; evaluation order is still fixed within a build.

// c[m,n] += sum_k a[m,k] * b[k,n]
template <typename S>
void gemm_nn(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n);

// c[m,n] += sum_k a[m,k] * b[n,k]
template <typename S>
void gemm_nt(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n);

// c[m,n] += sum_k a[k,m] * b[k,n]
template <typename S>
void gemm_tn(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n);

}  // namespace wf::detail
