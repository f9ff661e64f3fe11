#pragma once

#include <Eigen/Core>

#include <cstddef>

namespace bdlab::detail {

// C (m x n) = op(A) * op(B), or C += ... when accumulate is set. All buffers
// are dense row-major; op(A) is m x k and op(B) is k x n.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using ConstMap = Eigen::Map<const Mat>;
    const auto rows = static_cast<Eigen::Index>(m);
    const auto cols = static_cast<Eigen::Index>(n);
    const auto inner = static_cast<Eigen::Index>(k);
    Eigen::Map<Mat> out(c, rows, cols);
    if (!accumulate) out.setZero();
    if (!trans_a && !trans_b) {
        out.noalias() += ConstMap(a, rows, inner) * ConstMap(b, inner, cols);
    } else if (!trans_a && trans_b) {
        out.noalias() += ConstMap(a, rows, inner) * ConstMap(b, cols, inner).transpose();
    } else if (trans_a && !trans_b) {
        out.noalias() += ConstMap(a, inner, rows).transpose() * ConstMap(b, inner, cols);
    } else {
        out.noalias() += ConstMap(a, inner, rows).transpose() * ConstMap(b, cols, inner).transpose();
    }
}

} // namespace bdlab::detail
