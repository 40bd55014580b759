#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tinyicenet/errors.hpp"

namespace tinyicenet {

/// NCHW extents. Row-major with w fastest.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t numel() const noexcept { return n * c * h * w; }
  std::size_t plane() const noexcept { return h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense rank-4 tensor. Value type; copies are deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{}) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("elements", "buffer holds " + std::to_string(data_.size()) + " values, shape " +
                                       shape_.str() + " needs " + std::to_string(shape_.numel()));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) noexcept { return data_[index(n, c, y, x)]; }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
    return data_[index(n, c, y, x)];
  }

  /// Contiguous h*w plane for (n, c).
  T* plane(std::size_t n, std::size_t c) noexcept { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const T* plane(std::size_t n, std::size_t c) const noexcept {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_{};
  std::vector<T> data_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;
/// Per-pixel class codes, shape (n, 1, h, w).
using LabelMap = Tensor<std::uint8_t>;

/// Fixed-point tensor: real value = q * scale, q a `bits`-wide two's-complement integer.
struct FixedPointTensor {
  Tensor<std::int64_t> q;
  int bits = 16;
  double scale = 1.0;

  /// Throws ConfigError when an element falls outside the `bits` range or scale <= 0.
  void validate() const;
  Tensor64 to_real() const;
};

std::int64_t signed_max(int bits);
std::int64_t signed_min(int bits);

/// Element-wise bitwise equality (distinguishes -0.0 from 0.0, NaN payloads).
template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b);

extern template bool bit_equal(const Tensor<float>&, const Tensor<float>&);
extern template bool bit_equal(const Tensor<double>&, const Tensor<double>&);

}  // namespace tinyicenet
