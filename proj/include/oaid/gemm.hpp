#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <type_traits>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace oaid::detail {

// Activation buffers are several MB and reallocated every pass. glibc serves
// those with fresh mmaps by default, and the page faults cost more than the
// arithmetic; keeping them on the heap avoids that.
inline void tune_allocator() {
#ifdef __GLIBC__
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

// Row-major C = alpha * op(A) * op(B) + beta * C, with op(A) M×K and op(B) K×N.
// Eigen runs single-threaded here, so results are bit-reproducible.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  tune_allocator();
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  using ConstMap = Eigen::Map<const Mat, 0, Stride>;
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  Eigen::Map<Mat, 0, Stride> C(c, M, N, Stride(static_cast<Eigen::Index>(ldc)));
  if (beta == T{0}) C.setZero();
  else if (beta != T{1}) C *= beta;
  auto run = [&](const auto& A, const auto& B) { C.noalias() += alpha * (A * B); };
  const ConstMap A(a, trans_a ? K : M, trans_a ? M : K, Stride(static_cast<Eigen::Index>(lda)));
  const ConstMap B(b, trans_b ? N : K, trans_b ? K : N, Stride(static_cast<Eigen::Index>(ldb)));
  if (trans_a && trans_b) run(A.transpose(), B.transpose());
  else if (trans_a) run(A.transpose(), B);
  else if (trans_b) run(A, B.transpose());
  else run(A, B);
}

}  // namespace oaid::detail
