#include "tinyicenet/reference_ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <type_traits>

namespace tinyicenet {

namespace {

std::string dim_str(std::size_t v) { return std::to_string(v); }

}  // namespace

template <typename T>
Tensor<T> conv2d_ref(const Tensor<T>& input, const ConvKernel<T>& kernel, std::size_t pad, std::size_t stride) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.weights.shape();
  if (stride == 0) throw ConfigError("conv2d stride must be >= 1");
  if (is.c != ks.c) {
    throw ShapeError("channels", "input has " + dim_str(is.c) + " channels, kernel expects " + dim_str(ks.c));
  }
  if (kernel.has_bias() && kernel.bias.size() != ks.n) {
    throw ShapeError("bias", "bias length " + dim_str(kernel.bias.size()) + " != out channels " + dim_str(ks.n));
  }
  if (is.h + 2 * pad < ks.h) throw ShapeError("height", "kernel taller than padded input");
  if (is.w + 2 * pad < ks.w) throw ShapeError("width", "kernel wider than padded input");

  const std::size_t ho = (is.h + 2 * pad - ks.h) / stride + 1;
  const std::size_t wo = (is.w + 2 * pad - ks.w) / stride + 1;
  Tensor<T> out(Shape{is.n, ks.n, ho, wo});

  for (std::size_t n = 0; n < is.n; ++n) {
    for (std::size_t co = 0; co < ks.n; ++co) {
      for (std::size_t y = 0; y < ho; ++y) {
        for (std::size_t x = 0; x < wo; ++x) {
          T acc{};
          for (std::size_t ci = 0; ci < ks.c; ++ci) {
            for (std::size_t ky = 0; ky < ks.h; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(is.h)) continue;
              for (std::size_t kx = 0; kx < ks.w; ++kx) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(x * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(is.w)) continue;
                acc += input.at(n, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                       kernel.weights.at(co, ci, ky, kx);
              }
            }
          }
          if (kernel.has_bias()) acc += kernel.bias[co];
          out.at(n, co, y, x) = acc;
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& input) {
  const Shape& s = input.shape();
  if (s.h % 2 != 0) throw ShapeError("height", "maxpool2x2 needs even height, got " + dim_str(s.h));
  if (s.w % 2 != 0) throw ShapeError("width", "maxpool2x2 needs even width, got " + dim_str(s.w));
  Tensor<T> out(Shape{s.n, s.c, s.h / 2, s.w / 2});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < s.h / 2; ++y)
        for (std::size_t x = 0; x < s.w / 2; ++x) {
          T m = input.at(n, c, 2 * y, 2 * x);
          m = std::max(m, input.at(n, c, 2 * y, 2 * x + 1));
          m = std::max(m, input.at(n, c, 2 * y + 1, 2 * x));
          m = std::max(m, input.at(n, c, 2 * y + 1, 2 * x + 1));
          out.at(n, c, y, x) = m;
        }
  return out;
}

template <typename T>
Tensor<T> upsample(const Tensor<T>& input, std::size_t factor, UpsampleMode mode) {
  if (factor == 0) throw ConfigError("upsample factor must be >= 1");
  const Shape& s = input.shape();
  Tensor<T> out(Shape{s.n, s.c, s.h * factor, s.w * factor});
  if (mode == UpsampleMode::Nearest) {
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t y = 0; y < s.h * factor; ++y)
          for (std::size_t x = 0; x < s.w * factor; ++x) out.at(n, c, y, x) = input.at(n, c, y / factor, x / factor);
    return out;
  }
  if constexpr (std::is_integral_v<T>) {
    throw ConfigError("bilinear upsampling is defined for real tensors only");
  } else {
    // Half-pixel centres, edge-clamped (align_corners = false).
    auto coord = [factor](std::size_t dst, std::size_t extent, std::size_t& i0, std::size_t& i1, T& frac) {
      T src = (static_cast<T>(dst) + T(0.5)) / static_cast<T>(factor) - T(0.5);
      if (src < T(0)) src = T(0);
      i0 = std::min(static_cast<std::size_t>(src), extent - 1);
      i1 = std::min(i0 + 1, extent - 1);
      frac = src - static_cast<T>(i0);
    };
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t y = 0; y < s.h * factor; ++y) {
          std::size_t y0, y1;
          T fy;
          coord(y, s.h, y0, y1, fy);
          for (std::size_t x = 0; x < s.w * factor; ++x) {
            std::size_t x0, x1;
            T fx;
            coord(x, s.w, x0, x1, fx);
            const T top = input.at(n, c, y0, x0) * (T(1) - fx) + input.at(n, c, y0, x1) * fx;
            const T bot = input.at(n, c, y1, x0) * (T(1) - fx) + input.at(n, c, y1, x1) * fx;
            out.at(n, c, y, x) = top * (T(1) - fy) + bot * fy;
          }
        }
    return out;
  }
}

template <typename T>
Tensor<T> batchnorm_ref(const Tensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                        std::span<const T> running_mean, std::span<const T> running_var, T eps) {
  const Shape& s = input.shape();
  for (auto len : {gamma.size(), beta.size(), running_mean.size(), running_var.size()}) {
    if (len != s.c) throw ShapeError("channels", "batchnorm vector length " + dim_str(len) + " != " + dim_str(s.c));
  }
  Tensor<T> out(s);
  for (std::size_t c = 0; c < s.c; ++c) {
    if (!(running_var[c] + eps > T(0))) throw ConfigError("batchnorm variance + eps must be positive");
    const T stddev = std::sqrt(running_var[c] + eps);
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x)
          out.at(n, c, y, x) = gamma[c] * (input.at(n, c, y, x) - running_mean[c]) / stddev + beta[c];
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  auto src = input.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
  return out;
}

template <typename T>
LabelMap argmax_channels(const Tensor<T>& input) {
  const Shape& s = input.shape();
  if (s.c == 0) throw ShapeError("channels", "argmax needs at least one channel");
  if (s.c > 256) throw ShapeError("channels", "argmax supports at most 256 classes");
  LabelMap out(Shape{s.n, 1, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < s.c; ++c)
          if (input.at(n, c, y, x) > input.at(n, best, y, x)) best = c;
        out.at(n, 0, y, x) = static_cast<std::uint8_t>(best);
      }
  return out;
}

#define TINYICENET_REAL_OPS(T)                                                                              \
  template Tensor<T> conv2d_ref(const Tensor<T>&, const ConvKernel<T>&, std::size_t, std::size_t);        \
  template Tensor<T> maxpool2x2(const Tensor<T>&);                                                        \
  template Tensor<T> upsample(const Tensor<T>&, std::size_t, UpsampleMode);                               \
  template Tensor<T> batchnorm_ref(const Tensor<T>&, std::span<const T>, std::span<const T>,              \
                                   std::span<const T>, std::span<const T>, T);                            \
  template Tensor<T> relu(const Tensor<T>&);                                                              \
  template LabelMap argmax_channels(const Tensor<T>&);

TINYICENET_REAL_OPS(float)
TINYICENET_REAL_OPS(double)
#undef TINYICENET_REAL_OPS

template Tensor<std::int64_t> conv2d_ref(const Tensor<std::int64_t>&, const ConvKernel<std::int64_t>&, std::size_t,
                                         std::size_t);
template Tensor<std::int64_t> maxpool2x2(const Tensor<std::int64_t>&);
template Tensor<std::int64_t> upsample(const Tensor<std::int64_t>&, std::size_t, UpsampleMode);
template Tensor<std::int64_t> relu(const Tensor<std::int64_t>&);
template LabelMap argmax_channels(const Tensor<std::int64_t>&);

}  // namespace tinyicenet
