#pragma once

// Dense math aliases and a flat named-tensor view used by the optimizer,
// gradient checker and checkpoint writer. Row-major storage throughout so
// serialized bytes match the in-memory layout.

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

namespace mxe {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <class T>
struct TensorRef {
  std::string name;
  T* data = nullptr;
  size_t size = 0;
  std::vector<uint32_t> dims;
};

template <class T>
inline TensorRef<T> ref_of(const std::string& name, Mat<T>& m) {
  return {name, m.data(), size_t(m.size()),
          {uint32_t(m.rows()), uint32_t(m.cols())}};
}

template <class T>
inline TensorRef<T> ref_of(const std::string& name, Vec<T>& v) {
  return {name, v.data(), size_t(v.size()), {uint32_t(v.size())}};
}

}  // namespace mxe
