#include "tinyicenet/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace tinyicenet::kernels {

namespace {

using index_t = std::ptrdiff_t;

void check_conv_shapes(const Shape& is, const Shape& ks, std::size_t bias_len, std::size_t pad) {
  if (is.c != ks.c) {
    throw ShapeError("channels",
                     "input has " + std::to_string(is.c) + " channels, kernel expects " + std::to_string(ks.c));
  }
  if (bias_len != 0 && bias_len != ks.n) throw ShapeError("bias", "bias length does not match out channels");
  if (is.h + 2 * pad < ks.h) throw ShapeError("height", "kernel taller than padded input");
  if (is.w + 2 * pad < ks.w) throw ShapeError("width", "kernel wider than padded input");
}

// One output row of a 3x3 / pad-1 convolution for a single input channel.
// Rows r0..r2 are the input rows at y-1, y, y+1; a false template flag means
// that row lies in the zero padding and its taps are skipped, exactly as the
// reference skips them.
template <typename T, bool R0, bool R1, bool R2>
void accumulate_row_3x3(T* __restrict o, const T* __restrict r0, const T* __restrict r1, const T* __restrict r2,
                        const T* __restrict w, std::size_t width) {
  if (width == 1) {
    T acc = o[0];
    if (R0) acc += r0[0] * w[1];
    if (R1) acc += r1[0] * w[4];
    if (R2) acc += r2[0] * w[7];
    o[0] = acc;
    return;
  }
  {
    T acc = o[0];
    if (R0) { acc += r0[0] * w[1]; acc += r0[1] * w[2]; }
    if (R1) { acc += r1[0] * w[4]; acc += r1[1] * w[5]; }
    if (R2) { acc += r2[0] * w[7]; acc += r2[1] * w[8]; }
    o[0] = acc;
  }
  const T w0 = w[0], w1 = w[1], w2 = w[2], w3 = w[3], w4 = w[4], w5 = w[5], w6 = w[6], w7 = w[7], w8 = w[8];
  for (std::size_t x = 1; x + 1 < width; ++x) {
    T acc = o[x];
    if (R0) { acc += r0[x - 1] * w0; acc += r0[x] * w1; acc += r0[x + 1] * w2; }
    if (R1) { acc += r1[x - 1] * w3; acc += r1[x] * w4; acc += r1[x + 1] * w5; }
    if (R2) { acc += r2[x - 1] * w6; acc += r2[x] * w7; acc += r2[x + 1] * w8; }
    o[x] = acc;
  }
  {
    const std::size_t x = width - 1;
    T acc = o[x];
    if (R0) { acc += r0[x - 1] * w[0]; acc += r0[x] * w[1]; }
    if (R1) { acc += r1[x - 1] * w[3]; acc += r1[x] * w[4]; }
    if (R2) { acc += r2[x - 1] * w[6]; acc += r2[x] * w[7]; }
    o[x] = acc;
  }
}

template <typename T>
void conv_plane_3x3_pad1(T* out, const T* in, const T* w, std::size_t h, std::size_t wd) {
  for (std::size_t y = 0; y < h; ++y) {
    T* o = out + y * wd;
    const T* r0 = y > 0 ? in + (y - 1) * wd : nullptr;
    const T* r1 = in + y * wd;
    const T* r2 = y + 1 < h ? in + (y + 1) * wd : nullptr;
    if (r0 && r2) accumulate_row_3x3<T, true, true, true>(o, r0, r1, r2, w, wd);
    else if (r2) accumulate_row_3x3<T, false, true, true>(o, r0, r1, r2, w, wd);
    else if (r0) accumulate_row_3x3<T, true, true, false>(o, r0, r1, r2, w, wd);
    else accumulate_row_3x3<T, false, true, false>(o, r0, r1, r2, w, wd);
  }
}

// Any kernel size / padding, stride 1. Same tap order as the reference.
template <typename T>
void conv_plane_generic(T* out, const T* in, const T* w, const Shape& is, const Shape& ks, std::size_t pad,
                        std::size_t ho, std::size_t wo) {
  for (std::size_t y = 0; y < ho; ++y) {
    T* o = out + y * wo;
    for (std::size_t ky = 0; ky < ks.h; ++ky) {
      const index_t iy = static_cast<index_t>(y + ky) - static_cast<index_t>(pad);
      if (iy < 0 || iy >= static_cast<index_t>(is.h)) continue;
      const T* irow = in + static_cast<std::size_t>(iy) * is.w;
      for (std::size_t kx = 0; kx < ks.w; ++kx) {
        const T wv = w[ky * ks.w + kx];
        const std::size_t x0 = kx < pad ? pad - kx : 0;
        const std::size_t x1 = std::min(wo, is.w + pad - kx);
        for (std::size_t x = x0; x < x1; ++x) o[x] += irow[x + kx - pad] * wv;
      }
    }
  }
}

}  // namespace

int thread_count() { return omp_get_max_threads(); }

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, std::span<const T> bias, std::size_t pad) {
  const Shape& is = input.shape();
  const Shape& ks = weights.shape();
  check_conv_shapes(is, ks, bias.size(), pad);
  const std::size_t ho = is.h + 2 * pad - ks.h + 1;
  const std::size_t wo = is.w + 2 * pad - ks.w + 1;
  Tensor<T> out(Shape{is.n, ks.n, ho, wo});
  const bool fast3 = ks.h == 3 && ks.w == 3 && pad == 1;
  const bool pointwise = ks.h == 1 && ks.w == 1 && pad == 0;
  const index_t jobs = static_cast<index_t>(is.n * ks.n);

#pragma omp parallel for schedule(static)
  for (index_t job = 0; job < jobs; ++job) {
    const std::size_t n = static_cast<std::size_t>(job) / ks.n;
    const std::size_t co = static_cast<std::size_t>(job) % ks.n;
    T* o = out.plane(n, co);
    for (std::size_t ci = 0; ci < ks.c; ++ci) {
      const T* in = input.plane(n, ci);
      const T* w = &weights.at(co, ci, 0, 0);
      if (fast3) {
        conv_plane_3x3_pad1(o, in, w, is.h, is.w);
      } else if (pointwise) {
        const T wv = w[0];
        const std::size_t len = is.plane();
        for (std::size_t i = 0; i < len; ++i) o[i] += in[i] * wv;
      } else {
        conv_plane_generic(o, in, w, is, ks, pad, ho, wo);
      }
    }
    if (!bias.empty()) {
      const T b = bias[co];
      for (std::size_t i = 0; i < ho * wo; ++i) o[i] += b;
    }
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_grad_input(const Tensor<T>& grad_out, const Tensor<T>& weights, std::size_t pad,
                            const Shape& input_shape) {
  const Shape& ks = weights.shape();
  if (grad_out.shape().c != ks.n) throw ShapeError("channels", "gradient channels do not match kernel outputs");
  if (pad + 1 > ks.h || pad + 1 > ks.w) throw ConfigError("grad_input needs pad < kernel size");
  // Full correlation with the spatially flipped, channel-transposed kernel.
  Tensor<T> flipped(Shape{ks.c, ks.n, ks.h, ks.w});
  for (std::size_t co = 0; co < ks.n; ++co)
    for (std::size_t ci = 0; ci < ks.c; ++ci)
      for (std::size_t ky = 0; ky < ks.h; ++ky)
        for (std::size_t kx = 0; kx < ks.w; ++kx)
          flipped.at(ci, co, ks.h - 1 - ky, ks.w - 1 - kx) = weights.at(co, ci, ky, kx);
  Tensor<T> gin = conv2d<T>(grad_out, flipped, {}, ks.h - 1 - pad);
  if (gin.shape() != input_shape) throw ShapeError("spatial", "grad_input shape " + gin.shape().str());
  return gin;
}

template <typename T>
void conv2d_grad_params(const Tensor<T>& grad_out, const Tensor<T>& input, std::size_t pad, Tensor<T>& grad_weights,
                        std::vector<T>* grad_bias) {
  const Shape& is = input.shape();
  const Shape& gs = grad_out.shape();
  const Shape& ks = grad_weights.shape();
  if (gs.n != is.n || gs.c != ks.n || ks.c != is.c) throw ShapeError("channels", "grad_params operand mismatch");
  const index_t jobs = static_cast<index_t>(ks.n * ks.c);

#pragma omp parallel for schedule(static)
  for (index_t job = 0; job < jobs; ++job) {
    const std::size_t co = static_cast<std::size_t>(job) / ks.c;
    const std::size_t ci = static_cast<std::size_t>(job) % ks.c;
    for (std::size_t ky = 0; ky < ks.h; ++ky) {
      for (std::size_t kx = 0; kx < ks.w; ++kx) {
        const std::size_t x0 = kx < pad ? pad - kx : 0;
        const std::size_t x1 = std::min(gs.w, is.w + pad - kx);
        T acc{};
        for (std::size_t n = 0; n < is.n; ++n) {
          const T* g = grad_out.plane(n, co);
          const T* in = input.plane(n, ci);
          for (std::size_t y = 0; y < gs.h; ++y) {
            const index_t iy = static_cast<index_t>(y + ky) - static_cast<index_t>(pad);
            if (iy < 0 || iy >= static_cast<index_t>(is.h)) continue;
            const T* grow = g + y * gs.w;
            const T* irow = in + static_cast<std::size_t>(iy) * is.w + kx - pad;
            T row_acc{};
#pragma omp simd reduction(+ : row_acc)
            for (std::size_t x = x0; x < x1; ++x) row_acc += grow[x] * irow[x];
            acc += row_acc;
          }
        }
        grad_weights.at(co, ci, ky, kx) = acc;
      }
    }
  }
  if (grad_bias) {
    grad_bias->assign(ks.n, T{});
    for (std::size_t co = 0; co < ks.n; ++co) {
      T acc{};
      for (std::size_t n = 0; n < gs.n; ++n) {
        const T* g = grad_out.plane(n, co);
        T plane_acc{};
#pragma omp simd reduction(+ : plane_acc)
        for (std::size_t i = 0; i < gs.plane(); ++i) plane_acc += g[i];
        acc += plane_acc;
      }
      (*grad_bias)[co] = acc;
    }
  }
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                    std::span<const T> mean, std::span<const T> var, T eps) {
  const Shape& s = input.shape();
  for (auto len : {gamma.size(), beta.size(), mean.size(), var.size()})
    if (len != s.c) throw ShapeError("channels", "batchnorm vector length mismatch");
  for (std::size_t c = 0; c < s.c; ++c)
    if (!(var[c] + eps > T(0))) throw ConfigError("batchnorm variance + eps must be positive");
  Tensor<T> out(s);
  const index_t jobs = static_cast<index_t>(s.n * s.c);
#pragma omp parallel for schedule(static)
  for (index_t job = 0; job < jobs; ++job) {
    const std::size_t n = static_cast<std::size_t>(job) / s.c;
    const std::size_t c = static_cast<std::size_t>(job) % s.c;
    const T stddev = std::sqrt(var[c] + eps);
    const T g = gamma[c], b = beta[c], m = mean[c];
    const T* src = input.plane(n, c);
    T* dst = out.plane(n, c);
    for (std::size_t i = 0; i < s.plane(); ++i) dst[i] = g * (src[i] - m) / stddev + b;
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm_train(const Tensor<T>& input, std::span<const T> gamma, std::span<const T> beta, T eps,
                          BatchNormCache<T>& cache) {
  const Shape& s = input.shape();
  if (gamma.size() != s.c || beta.size() != s.c) throw ShapeError("channels", "batchnorm vector length mismatch");
  const std::size_t count = s.n * s.plane();
  if (count == 0) throw ShapeError("elements", "batchnorm over an empty batch");
  cache.count = count;
  cache.xhat = Tensor<T>(s);
  cache.inv_std.assign(s.c, T{});
  cache.batch_mean.assign(s.c, T{});
  cache.batch_var.assign(s.c, T{});
  Tensor<T> out(s);
  const index_t channels = static_cast<index_t>(s.c);
#pragma omp parallel for schedule(static)
  for (index_t ic = 0; ic < channels; ++ic) {
    const std::size_t c = static_cast<std::size_t>(ic);
    double sum = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* src = input.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) sum += static_cast<double>(src[i]);
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* src = input.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        const double d = static_cast<double>(src[i]) - mean;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(count);
    const T inv_std = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    cache.batch_mean[c] = static_cast<T>(mean);
    cache.batch_var[c] = static_cast<T>(var);
    cache.inv_std[c] = inv_std;
    const T m = static_cast<T>(mean);
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* src = input.plane(n, c);
      T* xh = cache.xhat.plane(n, c);
      T* dst = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        xh[i] = (src[i] - m) * inv_std;
        dst[i] = gamma[c] * xh[i] + beta[c];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm_backward(const Tensor<T>& grad_out, const BatchNormCache<T>& cache, std::span<const T> gamma,
                             std::vector<T>& grad_gamma, std::vector<T>& grad_beta) {
  const Shape& s = grad_out.shape();
  if (s != cache.xhat.shape()) throw ShapeError("elements", "batchnorm backward shape mismatch");
  grad_gamma.assign(s.c, T{});
  grad_beta.assign(s.c, T{});
  Tensor<T> gin(s);
  const index_t channels = static_cast<index_t>(s.c);
  const double count = static_cast<double>(cache.count);
#pragma omp parallel for schedule(static)
  for (index_t ic = 0; ic < channels; ++ic) {
    const std::size_t c = static_cast<std::size_t>(ic);
    double dbeta = 0.0, dgamma = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* g = grad_out.plane(n, c);
      const T* xh = cache.xhat.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        dbeta += static_cast<double>(g[i]);
        dgamma += static_cast<double>(g[i]) * static_cast<double>(xh[i]);
      }
    }
    grad_beta[c] = static_cast<T>(dbeta);
    grad_gamma[c] = static_cast<T>(dgamma);
    const T k = static_cast<T>(static_cast<double>(gamma[c]) * static_cast<double>(cache.inv_std[c]) / count);
    const T mean_dbeta = static_cast<T>(dbeta);
    const T mean_dgamma = static_cast<T>(dgamma);
    const T cnt = static_cast<T>(count);
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* g = grad_out.plane(n, c);
      const T* xh = cache.xhat.plane(n, c);
      T* dst = gin.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) dst[i] = k * (cnt * g[i] - mean_dbeta - xh[i] * mean_dgamma);
    }
  }
  return gin;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  auto src = input.data();
  auto dst = out.data();
  const index_t len = static_cast<index_t>(src.size());
#pragma omp parallel for simd schedule(static)
  for (index_t i = 0; i < len; ++i) dst[i] = src[i] > T(0) ? src[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& output) {
  if (grad_out.shape() != output.shape()) throw ShapeError("elements", "relu backward shape mismatch");
  Tensor<T> gin(grad_out.shape());
  auto g = grad_out.data();
  auto y = output.data();
  auto dst = gin.data();
  const index_t len = static_cast<index_t>(g.size());
#pragma omp parallel for simd schedule(static)
  for (index_t i = 0; i < len; ++i) dst[i] = y[i] > T(0) ? g[i] : T(0);
  return gin;
}

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& input, std::vector<std::uint8_t>* winners) {
  const Shape& s = input.shape();
  if (s.h % 2 != 0) throw ShapeError("height", "maxpool2x2 needs even height");
  if (s.w % 2 != 0) throw ShapeError("width", "maxpool2x2 needs even width");
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<T> out(os);
  if (winners) winners->assign(os.numel(), 0);
  const index_t jobs = static_cast<index_t>(s.n * s.c);
#pragma omp parallel for schedule(static)
  for (index_t job = 0; job < jobs; ++job) {
    const std::size_t n = static_cast<std::size_t>(job) / s.c;
    const std::size_t c = static_cast<std::size_t>(job) % s.c;
    const T* src = input.plane(n, c);
    T* dst = out.plane(n, c);
    const std::size_t base = (n * s.c + c) * os.plane();
    for (std::size_t y = 0; y < os.h; ++y) {
      const T* a = src + 2 * y * s.w;
      const T* b = a + s.w;
      for (std::size_t x = 0; x < os.w; ++x) {
        const T v[4] = {a[2 * x], a[2 * x + 1], b[2 * x], b[2 * x + 1]};
        std::uint8_t best = 0;
        T m = v[0];
        for (std::uint8_t k = 1; k < 4; ++k)
          if (m < v[k]) { m = v[k]; best = k; }
        dst[y * os.w + x] = m;
        if (winners) (*winners)[base + y * os.w + x] = best;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> maxpool2x2_backward(const Tensor<T>& grad_out, const std::vector<std::uint8_t>& winners,
                              const Shape& input_shape) {
  const Shape& gs = grad_out.shape();
  if (winners.size() != gs.numel() || input_shape.h != 2 * gs.h || input_shape.w != 2 * gs.w)
    throw ShapeError("spatial", "maxpool backward shape mismatch");
  Tensor<T> gin(input_shape);
  const index_t jobs = static_cast<index_t>(gs.n * gs.c);
#pragma omp parallel for schedule(static)
  for (index_t job = 0; job < jobs; ++job) {
    const std::size_t n = static_cast<std::size_t>(job) / gs.c;
    const std::size_t c = static_cast<std::size_t>(job) % gs.c;
    const T* g = grad_out.plane(n, c);
    T* dst = gin.plane(n, c);
    const std::size_t base = (n * gs.c + c) * gs.plane();
    for (std::size_t y = 0; y < gs.h; ++y)
      for (std::size_t x = 0; x < gs.w; ++x) {
        const std::uint8_t k = winners[base + y * gs.w + x];
        dst[(2 * y + k / 2) * input_shape.w + 2 * x + k % 2] += g[y * gs.w + x];
      }
  }
  return gin;
}

namespace {

template <typename T>
struct BilinearTap {
  std::size_t i0, i1;
  T frac;
};

template <typename T>
std::vector<BilinearTap<T>> bilinear_taps(std::size_t extent, std::size_t factor) {
  std::vector<BilinearTap<T>> taps(extent * factor);
  for (std::size_t d = 0; d < taps.size(); ++d) {
    T src = (static_cast<T>(d) + T(0.5)) / static_cast<T>(factor) - T(0.5);
    if (src < T(0)) src = T(0);
    const std::size_t i0 = std::min(static_cast<std::size_t>(src), extent - 1);
    taps[d] = {i0, std::min(i0 + 1, extent - 1), src - static_cast<T>(i0)};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> upsample(const Tensor<T>& input, std::size_t factor, UpsampleMode mode) {
  if (factor == 0) throw ConfigError("upsample factor must be >= 1");
  const Shape& s = input.shape();
  const Shape os{s.n, s.c, s.h * factor, s.w * factor};
  Tensor<T> out(os);
  const index_t jobs = static_cast<index_t>(s.n * s.c);
  if (mode == UpsampleMode::Nearest) {
#pragma omp parallel for schedule(static)
    for (index_t job = 0; job < jobs; ++job) {
      const T* src = input.data().data() + static_cast<std::size_t>(job) * s.plane();
      T* dst = out.data().data() + static_cast<std::size_t>(job) * os.plane();
      for (std::size_t y = 0; y < os.h; ++y) {
        const T* srow = src + (y / factor) * s.w;
        T* drow = dst + y * os.w;
        for (std::size_t x = 0; x < os.w; ++x) drow[x] = srow[x / factor];
      }
    }
    return out;
  }
  const auto ty = bilinear_taps<T>(s.h, factor);
  const auto tx = bilinear_taps<T>(s.w, factor);
#pragma omp parallel for schedule(static)
  for (index_t job = 0; job < jobs; ++job) {
    const T* src = input.data().data() + static_cast<std::size_t>(job) * s.plane();
    T* dst = out.data().data() + static_cast<std::size_t>(job) * os.plane();
    for (std::size_t y = 0; y < os.h; ++y) {
      const T* a = src + ty[y].i0 * s.w;
      const T* b = src + ty[y].i1 * s.w;
      const T fy = ty[y].frac;
      for (std::size_t x = 0; x < os.w; ++x) {
        const T fx = tx[x].frac;
        const T top = a[tx[x].i0] * (T(1) - fx) + a[tx[x].i1] * fx;
        const T bot = b[tx[x].i0] * (T(1) - fx) + b[tx[x].i1] * fx;
        dst[y * os.w + x] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> upsample_backward(const Tensor<T>& grad_out, std::size_t factor, UpsampleMode mode,
                            const Shape& input_shape) {
  const Shape& gs = grad_out.shape();
  if (factor == 0 || gs.h != input_shape.h * factor || gs.w != input_shape.w * factor)
    throw ShapeError("spatial", "upsample backward shape mismatch");
  Tensor<T> gin(input_shape);
  const index_t jobs = static_cast<index_t>(input_shape.n * input_shape.c);
  if (mode == UpsampleMode::Nearest) {
#pragma omp parallel for schedule(static)
    for (index_t job = 0; job < jobs; ++job) {
      const T* g = grad_out.data().data() + static_cast<std::size_t>(job) * gs.plane();
      T* dst = gin.data().data() + static_cast<std::size_t>(job) * input_shape.plane();
      for (std::size_t y = 0; y < gs.h; ++y) {
        T* drow = dst + (y / factor) * input_shape.w;
        for (std::size_t x = 0; x < gs.w; ++x) drow[x / factor] += g[y * gs.w + x];
      }
    }
    return gin;
  }
  const auto ty = bilinear_taps<T>(input_shape.h, factor);
  const auto tx = bilinear_taps<T>(input_shape.w, factor);
#pragma omp parallel for schedule(static)
  for (index_t job = 0; job < jobs; ++job) {
    const T* g = grad_out.data().data() + static_cast<std::size_t>(job) * gs.plane();
    T* dst = gin.data().data() + static_cast<std::size_t>(job) * input_shape.plane();
    for (std::size_t y = 0; y < gs.h; ++y) {
      T* a = dst + ty[y].i0 * input_shape.w;
      T* b = dst + ty[y].i1 * input_shape.w;
      const T fy = ty[y].frac;
      for (std::size_t x = 0; x < gs.w; ++x) {
        const T v = g[y * gs.w + x];
        const T fx = tx[x].frac;
        a[tx[x].i0] += v * (T(1) - fy) * (T(1) - fx);
        a[tx[x].i1] += v * (T(1) - fy) * fx;
        b[tx[x].i0] += v * fy * (T(1) - fx);
        b[tx[x].i1] += v * fy * fx;
      }
    }
  }
  return gin;
}

template <typename T>
LabelMap argmax_channels(const Tensor<T>& input) {
  const Shape& s = input.shape();
  if (s.c == 0 || s.c > 256) throw ShapeError("channels", "argmax needs 1..256 channels");
  LabelMap out(Shape{s.n, 1, s.h, s.w});
  const index_t jobs = static_cast<index_t>(s.n);
#pragma omp parallel for schedule(static)
  for (index_t job = 0; job < jobs; ++job) {
    const std::size_t n = static_cast<std::size_t>(job);
    std::uint8_t* dst = out.plane(n, 0);
    std::vector<T> best(input.plane(n, 0), input.plane(n, 0) + s.plane());
    for (std::size_t c = 1; c < s.c; ++c) {
      const T* src = input.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i)
        if (src[i] > best[i]) {
          best[i] = src[i];
          dst[i] = static_cast<std::uint8_t>(c);
        }
    }
  }
  return out;
}

template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits, const LabelMap& labels,
                                            std::uint8_t ignore_label, bool want_grad) {
  const Shape& s = logits.shape();
  const Shape& ls = labels.shape();
  if (s.c < 2) throw ShapeError("channels", "cross-entropy needs at least two classes");
  if (ls.n != s.n || ls.c != 1 || ls.h != s.h || ls.w != s.w)
    throw ShapeError("labels", "label map " + ls.str() + " does not match logits " + s.str());

  CrossEntropyResult<T> result;
  for (auto v : labels.data()) {
    if (v == ignore_label) continue;
    if (v >= s.c) throw ConfigError("label " + std::to_string(v) + " outside 0.." + std::to_string(s.c - 1));
    ++result.valid;
  }
  if (want_grad) result.grad = Tensor<T>(s);
  if (result.valid == 0) return result;

  const double inv_n = 1.0 / static_cast<double>(result.valid);
  double total = 0.0;
  const index_t jobs = static_cast<index_t>(s.n);
  std::vector<double> per_sample(s.n, 0.0);
#pragma omp parallel for schedule(static)
  for (index_t job = 0; job < jobs; ++job) {
    const std::size_t n = static_cast<std::size_t>(job);
    const std::uint8_t* lab = labels.plane(n, 0);
    std::vector<double> p(s.c);
    double acc = 0.0;
    for (std::size_t i = 0; i < s.plane(); ++i) {
      if (lab[i] == ignore_label) continue;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, static_cast<double>(logits.plane(n, c)[i]));
      double sum = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) {
        p[c] = std::exp(static_cast<double>(logits.plane(n, c)[i]) - mx);
        sum += p[c];
      }
      acc += std::log(sum) - (static_cast<double>(logits.plane(n, lab[i])[i]) - mx);
      if (want_grad) {
        for (std::size_t c = 0; c < s.c; ++c) {
          const double onehot = c == lab[i] ? 1.0 : 0.0;
          result.grad.plane(n, c)[i] = static_cast<T>((p[c] / sum - onehot) * inv_n);
        }
      }
    }
    per_sample[n] = acc;
  }
  for (double v : per_sample) total += v;
  result.loss = total * inv_n;
  return result;
}

#define TINYICENET_KERNELS(T)                                                                                    \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::span<const T>, std::size_t);              \
  template Tensor<T> conv2d_grad_input(const Tensor<T>&, const Tensor<T>&, std::size_t, const Shape&);         \
  template void conv2d_grad_params(const Tensor<T>&, const Tensor<T>&, std::size_t, Tensor<T>&,                \
                                   std::vector<T>*);                                                           \
  template Tensor<T> batchnorm(const Tensor<T>&, std::span<const T>, std::span<const T>, std::span<const T>,   \
                               std::span<const T>, T);                                                         \
  template Tensor<T> batchnorm_train(const Tensor<T>&, std::span<const T>, std::span<const T>, T,              \
                                     BatchNormCache<T>&);                                                      \
  template Tensor<T> batchnorm_backward(const Tensor<T>&, const BatchNormCache<T>&, std::span<const T>,        \
                                        std::vector<T>&, std::vector<T>&);                                     \
  template Tensor<T> relu(const Tensor<T>&);                                                                   \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> maxpool2x2(const Tensor<T>&, std::vector<std::uint8_t>*);                                 \
  template Tensor<T> maxpool2x2_backward(const Tensor<T>&, const std::vector<std::uint8_t>&, const Shape&);    \
  template Tensor<T> upsample(const Tensor<T>&, std::size_t, UpsampleMode);                                    \
  template Tensor<T> upsample_backward(const Tensor<T>&, std::size_t, UpsampleMode, const Shape&);             \
  template LabelMap argmax_channels(const Tensor<T>&);                                                         \
  template CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>&, const LabelMap&, std::uint8_t, bool);

TINYICENET_KERNELS(float)
TINYICENET_KERNELS(double)
#undef TINYICENET_KERNELS

}  // namespace tinyicenet::kernels
