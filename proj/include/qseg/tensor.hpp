#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "qseg/errors.hpp"

namespace qseg {

// Dense 4-D array in (batch, channel, row, col) order, row-major contiguous.
// Element type is one of float, double (reference/gradcheck path), int8_t or
// int32_t; there is no dynamic dtype, the type parameter is the dtype.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(int n, int c, int h, int w) : n_(n), c_(c), h_(h), w_(w) {
    if (n < 1 || c < 1 || h < 1 || w < 1)
      throw std::invalid_argument("Tensor: all dims must be positive, got " + shape_str());
    data_.assign(numel(), T{});
  }

  static Tensor full(int n, int c, int h, int w, T value) {
    Tensor t(n, c, h, w);
    for (auto& v : t.data_) v = value;
    return t;
  }

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  bool empty() const { return data_.empty(); }

  std::size_t numel() const {
    return static_cast<std::size_t>(n_) * static_cast<std::size_t>(c_) *
           static_cast<std::size_t>(h_) * static_cast<std::size_t>(w_);
  }

  bool same_shape(const Tensor& o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  std::string shape_str() const {
    return "(" + std::to_string(n_) + "," + std::to_string(c_) + "," +
           std::to_string(h_) + "," + std::to_string(w_) + ")";
  }

  T& at(int n, int c, int y, int x) { return data_[idx(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const { return data_[idx(n, c, y, x)]; }

  // Pointer to the (n, c) plane, h*w contiguous elements.
  T* plane(int n, int c) { return data_.data() + idx(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + idx(n, c, 0, 0); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  bool operator==(const Tensor& o) const {
    return same_shape(o) && data_ == o.data_;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(n_, c_, h_, w_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  std::size_t idx(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x;
  }

  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<T> data_;
};

// Accumulator type for floating-point reductions: float tensors accumulate in
// double so results match independent double-precision oracles to well under
// the 1e-6 test tolerances.
template <typename T>
struct accum {
  using type = double;
};

template <typename T>
using accum_t = typename accum<T>::type;

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what) {
  if constexpr (std::is_floating_point_v<T>) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      if (!std::isfinite(t.data()[i]))
        throw numeric_error("non-finite value in " + what);
    }
  }
}

inline void check_finite(const std::vector<float>& v, const std::string& what) {
  for (float x : v)
    if (!std::isfinite(x)) throw numeric_error("non-finite value in " + what);
}

}  // namespace qseg
