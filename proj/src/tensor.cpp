#include "tinyicenet/tensor.hpp"

#include <cstring>

namespace tinyicenet {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
}

std::int64_t signed_max(int bits) {
  if (bits < 2 || bits > 63) throw ConfigError("bit width " + std::to_string(bits) + " outside [2, 63]");
  return (std::int64_t{1} << (bits - 1)) - 1;
}

std::int64_t signed_min(int bits) { return -signed_max(bits) - 1; }

void FixedPointTensor::validate() const {
  if (!(scale > 0.0)) throw ConfigError("fixed-point scale must be positive");
  const auto hi = signed_max(bits);
  const auto lo = signed_min(bits);
  for (auto v : q.data()) {
    if (v < lo || v > hi) {
      throw ConfigError("fixed-point element " + std::to_string(v) + " does not fit in " + std::to_string(bits) +
                        " bits");
    }
  }
}

Tensor64 FixedPointTensor::to_real() const {
  Tensor64 out(q.shape());
  auto dst = out.data();
  auto src = q.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<double>(src[i]) * scale;
  return out;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

template bool bit_equal(const Tensor<float>&, const Tensor<float>&);
template bool bit_equal(const Tensor<double>&, const Tensor<double>&);

}  // namespace tinyicenet
