#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "gilab/common.hpp"

namespace gilab {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape &s) {
  std::int64_t n = 1;
  for (auto d : s)
    n *= d;
  return n;
}

inline std::string shape_str(const Shape &s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i)
    out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

// 64-byte aligned storage. Eigen's vectorized kernels peel loop heads based
// on runtime pointer alignment; pinning the base alignment keeps elementwise
// results bit-identical across runs regardless of heap history.
template <typename T> struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;
  AlignedAllocator() = default;
  template <typename U> AlignedAllocator(const AlignedAllocator<U> &) {}
  T *allocate(std::size_t n) {
    return static_cast<T *>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
  }
  void deallocate(T *p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(kAlign));
  }
  bool operator==(const AlignedAllocator &) const { return true; }
};

// Dense row-major tensor. Plain value type: copy means copy.
template <typename T> struct Tensor {
  using DataVec = std::vector<T, AlignedAllocator<T>>;
  Shape shape;
  DataVec data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(std::size_t(shape_numel(shape)), T(0)) {}
  Tensor(Shape s, DataVec d) : shape(std::move(s)), data(std::move(d)) {
    require(std::int64_t(data.size()) == shape_numel(shape),
            "tensor data size ", data.size(), " does not match shape ", shape_str(shape));
  }
  Tensor(Shape s, const std::vector<T> &d)
      : shape(std::move(s)), data(d.begin(), d.end()) {
    require(std::int64_t(data.size()) == shape_numel(shape),
            "tensor data size ", data.size(), " does not match shape ", shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(T v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }

  std::int64_t size() const { return std::int64_t(data.size()); }
  int rank() const { return int(shape.size()); }
  std::int64_t dim(int i) const { return shape[std::size_t(i)]; }

  T &operator[](std::int64_t i) { return data[std::size_t(i)]; }
  const T &operator[](std::int64_t i) const { return data[std::size_t(i)]; }

  T &at(std::int64_t i, std::int64_t j) { return data[std::size_t(i * shape[1] + j)]; }
  const T &at(std::int64_t i, std::int64_t j) const { return data[std::size_t(i * shape[1] + j)]; }
  T &at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data[std::size_t((i * shape[1] + j) * shape[2] + k)];
  }
  const T &at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data[std::size_t((i * shape[1] + j) * shape[2] + k)];
  }

  bool same_shape(const Tensor &o) const { return shape == o.shape; }

  bool all_finite() const {
    for (const T &v : data)
      if (!std::isfinite(double(v)))
        return false;
    return true;
  }

  template <typename U> Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = U(data[i]);
    return out;
  }
};

template <typename T>
using EigenMatMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using EigenMatCMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C = A(m,k) * B(k,n) via Eigen.
template <typename T>
void gemm(const T *a, const T *b, T *c, std::int64_t m, std::int64_t k, std::int64_t n) {
  EigenMatCMap<T> ma(a, m, k);
  EigenMatCMap<T> mb(b, k, n);
  EigenMatMap<T> mc(c, m, n);
  mc.noalias() = ma * mb;
}

// Same product with a fixed k-ascending accumulation order. Slower, but the
// result is invariant to appending zero rows to the k dimension, which the
// patch-embedding relies on when the input gains a zero-filled channel.
template <typename T>
void gemm_seq(const T *a, const T *b, T *c, std::int64_t m, std::int64_t k, std::int64_t n) {
  std::fill(c, c + m * n, T(0));
  for (std::int64_t i = 0; i < m; ++i) {
    T *crow = c + i * n;
    const T *arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T *brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j)
        crow[j] += av * brow[j];
    }
  }
}

} // namespace gilab
