#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace canet::detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// C[m×n] (+)= op(A) · op(B), all row-major; op(A) is m×k, op(B) is k×n.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MapMat<T> out(c, M, N);
  ConstMapMat<T> A(a, trans_a ? K : M, trans_a ? M : K);
  ConstMapMat<T> B(b, trans_b ? N : K, trans_b ? K : N);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      out.noalias() += lhs * rhs;
    } else {
      out.noalias() = lhs * rhs;
    }
  };
  if (trans_a && trans_b) {
    run(A.transpose(), B.transpose());
  } else if (trans_a) {
    run(A.transpose(), B);
  } else if (trans_b) {
    run(A, B.transpose());
  } else {
    run(A, B);
  }
}

}  // namespace canet::detail
