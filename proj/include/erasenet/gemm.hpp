#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <type_traits>

namespace erasenet::blas {

/// Leading dimensions of the row-major operands; zero means packed.
struct Strides {
  std::size_t lda = 0, ldb = 0, ldc = 0;
};

/// Row-major C = alpha * op(A) * op(B) + beta * C, with op(A) M x K and
/// op(B) K x N.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, const T* b, T beta, T* c, Strides ld = {}) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  const auto lda = static_cast<Eigen::Index>(ld.lda ? ld.lda : (trans_a ? m : k));
  const auto ldb = static_cast<Eigen::Index>(ld.ldb ? ld.ldb : (trans_b ? k : n));
  const auto ldc = static_cast<Eigen::Index>(ld.ldc ? ld.ldc : n);
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);

  Eigen::Map<Mat, 0, Stride> C(c, M, N, Stride(ldc));
  if (beta == T(0)) {
    C.setZero();
  } else if (beta != T(1)) {
    C *= beta;
  }
  Eigen::Map<const Mat, 0, Stride> A(a, trans_a ? K : M, trans_a ? M : K, Stride(lda));
  Eigen::Map<const Mat, 0, Stride> B(b, trans_b ? N : K, trans_b ? K : N, Stride(ldb));
  if (trans_a && trans_b) {
    C.noalias() += alpha * A.transpose() * B.transpose();
  } else if (trans_a) {
    C.noalias() += alpha * A.transpose() * B;
  } else if (trans_b) {
    C.noalias() += alpha * A * B.transpose();
  } else {
    C.noalias() += alpha * A * B;
  }
}

}  // namespace erasenet::blas
