#pragma once

#include <Eigen/Dense>
#include <span>

namespace cpeft::detail {

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using MatMap = Eigen::Map<RowMatrix<S>>;

template <typename S>
using ConstMatMap = Eigen::Map<const RowMatrix<S>>;

template <typename S>
MatMap<S> as_matrix(S* p, std::size_t rows, std::size_t cols) {
  return MatMap<S>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename S>
ConstMatMap<S> as_matrix(const S* p, std::size_t rows, std::size_t cols) {
  return ConstMatMap<S>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

}  // namespace cpeft::detail
