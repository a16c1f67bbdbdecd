#include "gemm.hpp"

#include <algorithm>

namespace wf::detail {

namespace {
constexpr std::int64_t kRowBlock = 32;
}

template <typename S>
void gemm_nn(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i0 = 0; i0 < m; i0 += kRowBlock) {
    const std::int64_t i1 = std::min(i0 + kRowBlock, m);
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const S* brow = b + kk * n;
      for (std::int64_t i = i0; i < i1; ++i) {
        const S av = a[i * k + kk];
        S* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename S>
void gemm_nt(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  constexpr std::int64_t kQ = 8;
  for (std::int64_t i0 = 0; i0 < m; i0 += kQ) {
    const std::int64_t i1 = std::min(i0 + kQ, m);
    for (std::int64_t j = 0; j < n; ++j) {
      const S* brow = b + j * k;
      for (std::int64_t i = i0; i < i1; ++i) {
        const S* arow = a + i * k;
        S acc = 0;
        for (std::int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
        c[i * n + j] += acc;
      }
    }
  }
}

template <typename S>
void gemm_tn(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t kk = 0; kk < k; ++kk) {
    const S* arow = a + kk * m;
    const S* brow = b + kk * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const S av = arow[i];
      S* crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template void gemm_nn<float>(const float*, const float*, float*, std::int64_t, std::int64_t, std::int64_t);
template void gemm_nn<double>(const double*, const double*, double*, std::int64_t, std::int64_t, std::int64_t);
template void gemm_nt<float>(const float*, const float*, float*, std::int64_t, std::int64_t, std::int64_t);
template void gemm_nt<double>(const double*, const double*, double*, std::int64_t, std::int64_t, std::int64_t);
template void gemm_tn<float>(const float*, const float*, float*, std::int64_t, std::int64_t, std::int64_t);
template void gemm_tn<double>(const double*, const double*, double*, std::int64_t, std::int64_t, std::int64_t);

}  // namespace wf::detail
