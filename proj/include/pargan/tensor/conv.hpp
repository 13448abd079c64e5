#pragma once

#include <string>
#include <vector>

#include "pargan/tensor/blas.hpp"
#include "pargan/tensor/ops.hpp"

// Convolution family. conv2d, its input-gradient and its weight-gradient are
// the three partial evaluations of one trilinear form <conv(x, w), g>, so the
// backward of each is expressed with the other two and the family is closed
// under repeated differentiation.

namespace pargan {

struct ConvGeometry {
  std::int64_t n, c, h, w;     // input
  std::int64_t o, k;           // output channels, square kernel extent
  std::int64_t stride, pad;
  std::int64_t oh, ow;         // output spatial extent
};

namespace detail {

inline ConvGeometry conv_geometry(const Shape& in, const Shape& kernel, std::int64_t stride,
                                  std::int64_t pad) {
  if (in.size() != 4) throw DimensionError("conv2d: input must be NCHW, got " + shape_str(in));
  if (kernel.size() != 4) {
    throw DimensionError("conv2d: kernel must be OIkk, got " + shape_str(kernel));
  }
  if (kernel[1] != in[1]) {
    throw DimensionError("conv2d: input axis 1 (" + std::to_string(in[1]) +
                         " channels) != kernel axis 1 (" + std::to_string(kernel[1]) + ")");
  }
  if (kernel[2] != kernel[3]) {
    throw DimensionError("conv2d: kernel axes 2,3 must be equal, got " + shape_str(kernel));
  }
  if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
  if (pad < 0) throw ParameterError("conv2d: pad must be >= 0");
  const auto k = kernel[2];
  if (in[2] + 2 * pad < k || in[3] + 2 * pad < k) {
    throw DimensionError("conv2d: padded input axes 2,3 (" + std::to_string(in[2] + 2 * pad) + "x" +
                         std::to_string(in[3] + 2 * pad) + ") smaller than kernel " +
                         std::to_string(k));
  }
  ConvGeometry g{in[0], in[1], in[2], in[3], kernel[0], k, stride, pad, 0, 0};
  g.oh = (g.h + 2 * pad - k) / stride + 1;
  g.ow = (g.w + 2 * pad - k) / stride + 1;
  return g;
}

// cols[(c*k + ki)*k + kj][oy*ow + ox] = x[c][oy*s - p + ki][ox*s - p + kj]
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const auto ohw = g.oh * g.ow;
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        T* row = cols + ((c * g.k + ki) * g.k + kj) * ohw;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = oy * g.stride - g.pad + ki;
          T* dst = row + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.ow, T{0});
            continue;
          }
          const T* src = x + (c * g.h + iy) * g.w;
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = ox * g.stride - g.pad + kj;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* x) {
  const auto ohw = g.oh * g.ow;
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const T* row = cols + ((c * g.k + ki) * g.k + kj) * ohw;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = x + (c * g.h + iy) * g.w;
          const T* src = row + oy * g.ow;
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& grad_out, const Tensor<T>& kernel,
                            const Shape& input_shape, std::int64_t stride, std::int64_t pad);
template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& input, const Tensor<T>& grad_out,
                             const Shape& kernel_shape, std::int64_t stride, std::int64_t pad);

/// Cross-correlation of NCHW `input` with OIkk `kernel`, zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::int64_t stride,
                 std::int64_t pad) {
  const auto g = detail::conv_geometry(input.shape(), kernel.shape(), stride, pad);
  const auto ckk = g.c * g.k * g.k;
  const auto ohw = g.oh * g.ow;
  Shape out_shape{g.n, g.o, g.oh, g.ow};
  std::vector<T> out(static_cast<std::size_t>(numel_of(out_shape)));
  std::vector<T> cols(static_cast<std::size_t>(ckk * ohw));
  for (std::int64_t b = 0; b < g.n; ++b) {
    detail::im2col(input.data().data() + b * g.c * g.h * g.w, g, cols.data());
    blas::gemm<T>(false, false, static_cast<int>(g.o), static_cast<int>(ohw),
                  static_cast<int>(ckk), T{1}, kernel.data().data(), static_cast<int>(ckk),
                  cols.data(), static_cast<int>(ohw), T{0}, out.data() + b * g.o * ohw,
                  static_cast<int>(ohw));
  }
  return detail::record<T>(
      "conv2d", {input, kernel}, make_result<T>(out_shape, std::move(out)),
      [input, kernel, stride, pad](const Tensor<T>& go, const std::vector<bool>& need) {
        typename Tape<T>::Grads r(2);
        if (need[0]) r[0] = conv2d_input_grad(go, kernel, input.shape(), stride, pad);
        if (need[1]) r[1] = conv2d_weight_grad(input, go, kernel.shape(), stride, pad);
        return r;
      });
}

/// Adjoint of conv2d in its input: maps an output-space gradient back to the
/// input space (a transposed convolution).
template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& grad_out, const Tensor<T>& kernel,
                            const Shape& input_shape, std::int64_t stride, std::int64_t pad) {
  const auto g = detail::conv_geometry(input_shape, kernel.shape(), stride, pad);
  if (grad_out.shape() != Shape{g.n, g.o, g.oh, g.ow}) {
    throw DimensionError("conv2d_input_grad: gradient shape " + shape_str(grad_out.shape()));
  }
  const auto ckk = g.c * g.k * g.k;
  const auto ohw = g.oh * g.ow;
  std::vector<T> out(static_cast<std::size_t>(numel_of(input_shape)), T{0});
  std::vector<T> cols(static_cast<std::size_t>(ckk * ohw));
  for (std::int64_t b = 0; b < g.n; ++b) {
    blas::gemm<T>(true, false, static_cast<int>(ckk), static_cast<int>(ohw), static_cast<int>(g.o),
                  T{1}, kernel.data().data(), static_cast<int>(ckk),
                  grad_out.data().data() + b * g.o * ohw, static_cast<int>(ohw), T{0}, cols.data(),
                  static_cast<int>(ohw));
    detail::col2im(cols.data(), g, out.data() + b * g.c * g.h * g.w);
  }
  return detail::record<T>(
      "conv2d_input_grad", {grad_out, kernel}, make_result<T>(input_shape, std::move(out)),
      [grad_out, kernel, stride, pad](const Tensor<T>& gz, const std::vector<bool>& need) {
        typename Tape<T>::Grads r(2);
        if (need[0]) r[0] = conv2d(gz, kernel, stride, pad);
        if (need[1]) r[1] = conv2d_weight_grad(gz, grad_out, kernel.shape(), stride, pad);
        return r;
      });
}

/// Adjoint of conv2d in its kernel.
template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& input, const Tensor<T>& grad_out,
                             const Shape& kernel_shape, std::int64_t stride, std::int64_t pad) {
  const auto g = detail::conv_geometry(input.shape(), kernel_shape, stride, pad);
  if (grad_out.shape() != Shape{g.n, g.o, g.oh, g.ow}) {
    throw DimensionError("conv2d_weight_grad: gradient shape " + shape_str(grad_out.shape()));
  }
  const auto ckk = g.c * g.k * g.k;
  const auto ohw = g.oh * g.ow;
  std::vector<T> out(static_cast<std::size_t>(numel_of(kernel_shape)), T{0});
  std::vector<T> cols(static_cast<std::size_t>(ckk * ohw));
  for (std::int64_t b = 0; b < g.n; ++b) {
    detail::im2col(input.data().data() + b * g.c * g.h * g.w, g, cols.data());
    blas::gemm<T>(false, true, static_cast<int>(g.o), static_cast<int>(ckk), static_cast<int>(ohw),
                  T{1}, grad_out.data().data() + b * g.o * ohw, static_cast<int>(ohw),
                  cols.data(), static_cast<int>(ohw), T{1}, out.data(), static_cast<int>(ckk));
  }
  return detail::record<T>(
      "conv2d_weight_grad", {input, grad_out}, make_result<T>(kernel_shape, std::move(out)),
      [input, grad_out, stride, pad](const Tensor<T>& gz, const std::vector<bool>& need) {
        typename Tape<T>::Grads r(2);
        if (need[0]) r[0] = conv2d_input_grad(grad_out, gz, input.shape(), stride, pad);
        if (need[1]) r[1] = conv2d(input, gz, stride, pad);
        return r;
      });
}

// ---- reflection padding -----------------------------------------------------

namespace detail {

inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

}  // namespace detail

template <typename T>
Tensor<T> pad_reflect_adjoint(const Tensor<T>& grad, std::int64_t pad, const Shape& input_shape);

/// Mirror padding without edge repetition; pad must be smaller than H and W.
template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, std::int64_t pad) {
  detail::require_rank4(x.shape(), "pad_reflect");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (pad < 0 || pad >= h || pad >= w) {
    throw DimensionError("pad_reflect: pad " + std::to_string(pad) + " needs axes 2,3 > pad, got " +
                         shape_str(x.shape()));
  }
  const auto ph = h + 2 * pad, pw = w + 2 * pad;
  Shape shape{n, c, ph, pw};
  std::vector<T> out(static_cast<std::size_t>(numel_of(shape)));
  auto in = x.data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    for (std::int64_t y = 0; y < ph; ++y) {
      const auto sy = detail::reflect_index(y - pad, h);
      for (std::int64_t xx = 0; xx < pw; ++xx) {
        out[(p * ph + y) * pw + xx] = in[(p * h + sy) * w + detail::reflect_index(xx - pad, w)];
      }
    }
  }
  const Shape in_shape = x.shape();
  return detail::record<T>("pad_reflect", {x}, make_result<T>(shape, std::move(out)),
                           [pad, in_shape](const Tensor<T>& g, const std::vector<bool>&) {
                             return typename Tape<T>::Grads{pad_reflect_adjoint(g, pad, in_shape)};
                           });
}

/// Scatter-adds a padded-space gradient back onto the unpadded input.
template <typename T>
Tensor<T> pad_reflect_adjoint(const Tensor<T>& grad, std::int64_t pad, const Shape& input_shape) {
  const auto n = input_shape[0], c = input_shape[1], h = input_shape[2], w = input_shape[3];
  const auto ph = h + 2 * pad, pw = w + 2 * pad;
  if (grad.shape() != Shape{n, c, ph, pw}) {
    throw DimensionError("pad_reflect_adjoint: gradient shape " + shape_str(grad.shape()));
  }
  std::vector<T> out(static_cast<std::size_t>(numel_of(input_shape)), T{0});
  auto in = grad.data();
  for (std::int64_t p = 0; p < n * c; ++p) {
    for (std::int64_t y = 0; y < ph; ++y) {
      const auto sy = detail::reflect_index(y - pad, h);
      for (std::int64_t xx = 0; xx < pw; ++xx) {
        out[(p * h + sy) * w + detail::reflect_index(xx - pad, w)] += in[(p * ph + y) * pw + xx];
      }
    }
  }
  return detail::record<T>("pad_reflect_adjoint", {grad}, make_result<T>(input_shape, std::move(out)),
                           [pad](const Tensor<T>& g, const std::vector<bool>&) {
                             return typename Tape<T>::Grads{pad_reflect(g, pad)};
                           });
}

// ---- nearest-neighbour resize ----------------------------------------------

template <typename T>
Tensor<T> sum_pool(const Tensor<T>& x, std::int64_t factor);

/// Replicates each pixel into a factor x factor block.
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& x, std::int64_t factor) {
  if (factor < 1) throw ParameterError("resize_nearest: factor must be >= 1, got " + std::to_string(factor));
  detail::require_rank4(x.shape(), "resize_nearest");
  const auto nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto oh = h * factor, ow = w * factor;
  Shape shape{x.dim(0), x.dim(1), oh, ow};
  std::vector<T> out(static_cast<std::size_t>(numel_of(shape)));
  auto in = x.data();
  for (std::int64_t p = 0; p < nc; ++p) {
    for (std::int64_t y = 0; y < oh; ++y) {
      const T* src = in.data() + (p * h + y / factor) * w;
      T* dst = out.data() + (p * oh + y) * ow;
      for (std::int64_t xx = 0; xx < ow; ++xx) dst[xx] = src[xx / factor];
    }
  }
  return detail::record<T>("resize_nearest", {x}, make_result<T>(shape, std::move(out)),
                           [factor](const Tensor<T>& g, const std::vector<bool>&) {
                             return typename Tape<T>::Grads{sum_pool(g, factor)};
                           });
}

/// Sums non-overlapping factor x factor blocks; the adjoint of resize_nearest.
template <typename T>
Tensor<T> sum_pool(const Tensor<T>& x, std::int64_t factor) {
  if (factor < 1) throw ParameterError("sum_pool: factor must be >= 1");
  detail::require_rank4(x.shape(), "sum_pool");
  const auto nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % factor != 0 || w % factor != 0) {
    throw DimensionError("sum_pool: axes 2,3 of " + shape_str(x.shape()) + " not divisible by " +
                         std::to_string(factor));
  }
  const auto oh = h / factor, ow = w / factor;
  Shape shape{x.dim(0), x.dim(1), oh, ow};
  std::vector<T> out(static_cast<std::size_t>(numel_of(shape)), T{0});
  auto in = x.data();
  for (std::int64_t p = 0; p < nc; ++p) {
    for (std::int64_t y = 0; y < h; ++y) {
      const T* src = in.data() + (p * h + y) * w;
      T* dst = out.data() + (p * oh + y / factor) * ow;
      for (std::int64_t xx = 0; xx < w; ++xx) dst[xx / factor] += src[xx];
    }
  }
  return detail::record<T>("sum_pool", {x}, make_result<T>(shape, std::move(out)),
                           [factor](const Tensor<T>& g, const std::vector<bool>&) {
                             return typename Tape<T>::Grads{resize_nearest(g, factor)};
                           });
}

}  // namespace pargan
