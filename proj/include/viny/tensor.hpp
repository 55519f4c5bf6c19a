// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace viny {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// Non-owning view of one learnable tensor, addressed by its canonical path.
template <typename T>
struct ParamRef {
  std::string path;
  T *data = nullptr;
  std::int64_t rows = 0;
  std::int64_t cols = 0;

  std::int64_t size() const { return rows * cols; }
};

template <typename T>
ParamRef<T> param_ref(std::string path, Matrix<T> &m) {
  return {std::move(path), m.data(), m.rows(), m.cols()};
}

template <typename T>
ParamRef<T> param_ref(std::string path, RowVector<T> &v) {
  return {std::move(path), v.data(), 1, v.cols()};
}

/// Sum of element counts over a parameter list.
template <typename T>
std::int64_t count_scalars(const std::vector<ParamRef<T>> &refs) {
  std::int64_t n = 0;
  for (const auto &r : refs)
    n += r.size();
  return n;
}

} // namespace viny
