#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "pargan/tensor/tensor.hpp"

// Elementwise, reduction and layout ops. Every backward here is written in
// terms of other recorded ops, so gradients can themselves be differentiated
// (needed for the gradient penalty), unless the op says otherwise.

namespace pargan {

namespace detail {

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& x, F f) {
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(x.shape(), std::move(out));
}

template <typename T>
void require_first_order(std::string_view op) {
  if (Tape<T>::active() != nullptr) {
    throw ContractError(std::string(op) + " does not support differentiating its gradient");
  }
}

inline Shape broadcast_shape(const Shape& a, std::int64_t na, const Shape& b, std::int64_t nb,
                             std::string_view op) {
  if (a == b) return a;
  if (nb == 1) return a;
  if (na == 1) return b;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b) + " (only same-shape and scalar operands are supported)");
}

}  // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

/// Broadcasts a single-element tensor to `shape`.
template <typename T>
Tensor<T> expand(const Tensor<T>& s, const Shape& shape) {
  if (!s.is_scalar()) throw DimensionError("expand: expected scalar, got " + shape_str(s.shape()));
  auto out = Tensor<T>::full(shape, s.item());
  const Shape s_shape = s.shape();
  return detail::record<T>("expand", {s}, out,
                           [s_shape](const Tensor<T>& g, const std::vector<bool>&) {
                             return typename Tape<T>::Grads{reshape(sum(g), s_shape)};
                           });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto out = make_result<T>(shape, x.values());
  const Shape in_shape = x.shape();
  return detail::record<T>("reshape", {x}, out,
                           [in_shape](const Tensor<T>& g, const std::vector<bool>&) {
                             return typename Tape<T>::Grads{reshape(g, in_shape)};
                           });
}

namespace detail {

// Reduces a broadcast gradient back onto a scalar operand when needed.
template <typename T>
Tensor<T> unbroadcast(const Tensor<T>& g, const Shape& target) {
  if (g.shape() == target) return g;
  return reshape(sum(g), target);
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape shape = detail::broadcast_shape(a.shape(), a.numel(), b.shape(), b.numel(), "add");
  std::vector<T> out(static_cast<std::size_t>(numel_of(shape)));
  auto da = a.data();
  auto db = b.data();
  const bool sa = a.numel() == 1 && a.shape() != shape;
  const bool sb = b.numel() == 1 && b.shape() != shape;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[sa ? 0 : i] + db[sb ? 0 : i];
  const Shape as = a.shape(), bs = b.shape();
  return detail::record<T>("add", {a, b}, make_result<T>(shape, std::move(out)),
                           [as, bs](const Tensor<T>& g, const std::vector<bool>& need) {
                             typename Tape<T>::Grads r(2);
                             if (need[0]) r[0] = detail::unbroadcast(g, as);
                             if (need[1]) r[1] = detail::unbroadcast(g, bs);
                             return r;
                           });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double s) {
  auto out = detail::map(x, [s](T v) { return static_cast<T>(v * s); });
  return detail::record<T>("scale", {x}, out, [s](const Tensor<T>& g, const std::vector<bool>&) {
    return typename Tape<T>::Grads{scale(g, s)};
  });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, -1.0);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, neg(b));
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double s) {
  auto out = detail::map(x, [s](T v) { return static_cast<T>(v + s); });
  return detail::record<T>("add_scalar", {x}, out,
                           [](const Tensor<T>& g, const std::vector<bool>&) {
                             return typename Tape<T>::Grads{g};
                           });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape shape = detail::broadcast_shape(a.shape(), a.numel(), b.shape(), b.numel(), "mul");
  std::vector<T> out(static_cast<std::size_t>(numel_of(shape)));
  auto da = a.data();
  auto db = b.data();
  const bool sa = a.numel() == 1 && a.shape() != shape;
  const bool sb = b.numel() == 1 && b.shape() != shape;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[sa ? 0 : i] * db[sb ? 0 : i];
  return detail::record<T>("mul", {a, b}, make_result<T>(shape, std::move(out)),
                           [a, b](const Tensor<T>& g, const std::vector<bool>& need) {
                             typename Tape<T>::Grads r(2);
                             if (need[0]) r[0] = detail::unbroadcast(mul(g, b), a.shape());
                             if (need[1]) r[1] = detail::unbroadcast(mul(g, a), b.shape());
                             return r;
                           });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return mul(x, x);
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  auto y = detail::map(x, [](T v) { return T{1} / v; });
  // d(1/x) = -y*y
  return detail::record_with_output<T>("reciprocal", {x}, y, [](Tensor<T> out) {
    return [out](const Tensor<T>& g, const std::vector<bool>&) {
      return typename Tape<T>::Grads{neg(mul(g, mul(out, out)))};
    };
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto out = detail::map(x, [](T v) { return v > T{0} ? v : T{0}; });
  return detail::record<T>("relu", {x}, out, [x](const Tensor<T>& g, const std::vector<bool>&) {
    auto mask = detail::map(x, [](T v) { return v > T{0} ? T{1} : T{0}; });
    return typename Tape<T>::Grads{mul(g, mask)};
  });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope) {
  const T s = static_cast<T>(slope);
  auto out = detail::map(x, [s](T v) { return v > T{0} ? v : s * v; });
  return detail::record<T>("leaky_relu", {x}, out,
                           [x, s](const Tensor<T>& g, const std::vector<bool>&) {
                             auto mask = detail::map(x, [s](T v) { return v > T{0} ? T{1} : s; });
                             return typename Tape<T>::Grads{mul(g, mask)};
                           });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  auto y = detail::map(x, [](T v) { return std::tanh(v); });
  return detail::record_with_output<T>("tanh", {x}, y, [](Tensor<T> out) {
    return [out](const Tensor<T>& g, const std::vector<bool>&) {
      return typename Tape<T>::Grads{mul(g, add_scalar(neg(mul(out, out)), 1.0))};
    };
  });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  auto out = detail::map(x, [](T v) { return std::abs(v); });
  return detail::record<T>("abs", {x}, out, [x](const Tensor<T>& g, const std::vector<bool>&) {
    auto sign = detail::map(x, [](T v) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
    return typename Tape<T>::Grads{mul(g, sign)};
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  // Pairwise-free but long double accumulation keeps float sums stable.
  long double acc = 0;
  for (auto v : x.data()) acc += v;
  auto out = Tensor<T>::scalar(static_cast<T>(acc));
  const Shape shape = x.shape();
  return detail::record<T>("sum", {x}, out, [shape](const Tensor<T>& g, const std::vector<bool>&) {
    return typename Tape<T>::Grads{expand(g, shape)};
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Mean absolute difference over all elements.
template <typename T>
Tensor<T> l1(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("l1: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  return mean(abs(sub(a, b)));
}

/// Euclidean norm of all elements. The gradient at the origin is taken as 0.
template <typename T>
Tensor<T> norm2(const Tensor<T>& x) {
  long double acc = 0;
  for (auto v : x.data()) acc += static_cast<long double>(v) * v;
  auto y = Tensor<T>::scalar(static_cast<T>(std::sqrt(acc)));
  return detail::record_with_output<T>("norm2", {x}, y, [x](Tensor<T> out) {
    return [x, out](const Tensor<T>& g, const std::vector<bool>&) {
      if (out.item() == T{0}) return typename Tape<T>::Grads{Tensor<T>::zeros(x.shape())};
      return typename Tape<T>::Grads{mul(x, expand(mul(g, reciprocal(out)), x.shape()))};
    };
  });
}

// ---- channel / batch layout ops (NCHW) -------------------------------------

namespace detail {

inline void require_rank4(const Shape& s, std::string_view op) {
  if (s.size() != 4) {
    throw DimensionError(std::string(op) + ": expected NCHW tensor, got " + shape_str(s));
  }
}

}  // namespace detail

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t begin, std::int64_t end);

/// Places `x` at channel offset `begin` of a zero tensor with `channels` channels.
template <typename T>
Tensor<T> embed_channels(const Tensor<T>& x, std::int64_t channels, std::int64_t begin) {
  detail::require_rank4(x.shape(), "embed_channels");
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (begin < 0 || begin + c > channels) throw DimensionError("embed_channels: range out of bounds");
  Shape shape{n, channels, x.dim(2), x.dim(3)};
  std::vector<T> out(static_cast<std::size_t>(numel_of(shape)), T{0});
  auto in = x.data();
  for (std::int64_t b = 0; b < n; ++b) {
    std::copy_n(in.begin() + b * c * hw, c * hw, out.begin() + (b * channels + begin) * hw);
  }
  return detail::record<T>("embed_channels", {x}, make_result<T>(shape, std::move(out)),
                           [begin, c](const Tensor<T>& g, const std::vector<bool>&) {
                             return typename Tape<T>::Grads{slice_channels(g, begin, begin + c)};
                           });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::int64_t begin, std::int64_t end) {
  detail::require_rank4(x.shape(), "slice_channels");
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (begin < 0 || end > c || begin >= end) {
    throw DimensionError("slice_channels: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + std::to_string(c) + " channels");
  }
  const auto k = end - begin;
  Shape shape{n, k, x.dim(2), x.dim(3)};
  std::vector<T> out(static_cast<std::size_t>(numel_of(shape)));
  auto in = x.data();
  for (std::int64_t b = 0; b < n; ++b) {
    std::copy_n(in.begin() + (b * c + begin) * hw, k * hw, out.begin() + b * k * hw);
  }
  return detail::record<T>("slice_channels", {x}, make_result<T>(shape, std::move(out)),
                           [c, begin](const Tensor<T>& g, const std::vector<bool>&) {
                             return typename Tape<T>::Grads{embed_channels(g, c, begin)};
                           });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank4(a.shape(), "concat_channels");
  detail::require_rank4(b.shape(), "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimensionError("concat_channels: axes 0,2,3 differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const auto n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Shape shape{n, ca + cb, a.dim(2), a.dim(3)};
  std::vector<T> out(static_cast<std::size_t>(numel_of(shape)));
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(a.data().begin() + i * ca * hw, ca * hw, out.begin() + i * (ca + cb) * hw);
    std::copy_n(b.data().begin() + i * cb * hw, cb * hw, out.begin() + (i * (ca + cb) + ca) * hw);
  }
  return detail::record<T>("concat_channels", {a, b}, make_result<T>(shape, std::move(out)),
                           [ca, cb](const Tensor<T>& g, const std::vector<bool>& need) {
                             typename Tape<T>::Grads r(2);
                             if (need[0]) r[0] = slice_channels(g, 0, ca);
                             if (need[1]) r[1] = slice_channels(g, ca, ca + cb);
                             return r;
                           });
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::int64_t index);

template <typename T>
Tensor<T> embed_batch(const Tensor<T>& x, std::int64_t batch, std::int64_t index) {
  const auto per = x.numel();
  Shape shape = x.shape();
  shape[0] = batch;
  std::vector<T> out(static_cast<std::size_t>(numel_of(shape)), T{0});
  std::copy(x.data().begin(), x.data().end(), out.begin() + index * per);
  return detail::record<T>("embed_batch", {x}, make_result<T>(shape, std::move(out)),
                           [index](const Tensor<T>& g, const std::vector<bool>&) {
                             return typename Tape<T>::Grads{slice_batch(g, index)};
                           });
}

/// Sample `index` along axis 0, keeping a leading extent of 1.
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::int64_t index) {
  if (x.rank() < 1 || index < 0 || index >= x.dim(0)) {
    throw DimensionError("slice_batch: index " + std::to_string(index) + " outside " +
                         shape_str(x.shape()));
  }
  const auto per = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = 1;
  std::vector<T> out(x.data().begin() + index * per, x.data().begin() + (index + 1) * per);
  const auto batch = x.dim(0);
  return detail::record<T>("slice_batch", {x}, make_result<T>(shape, std::move(out)),
                           [batch, index](const Tensor<T>& g, const std::vector<bool>&) {
                             return typename Tape<T>::Grads{embed_batch(g, batch, index)};
                           });
}

template <typename T>
Tensor<T> broadcast_channels(const Tensor<T>& v, const Shape& shape);

/// Sums an NCHW tensor over N, H and W, giving a length-C vector.
template <typename T>
Tensor<T> channel_sum(const Tensor<T>& x) {
  detail::require_rank4(x.shape(), "channel_sum");
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(c), T{0});
  auto in = x.data();
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      long double acc = 0;
      const T* p = in.data() + (b * c + ch) * hw;
      for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
      out[ch] += static_cast<T>(acc);
    }
  }
  const Shape shape = x.shape();
  return detail::record<T>("channel_sum", {x}, make_result<T>(Shape{c}, std::move(out)),
                           [shape](const Tensor<T>& g, const std::vector<bool>&) {
                             return typename Tape<T>::Grads{broadcast_channels(g, shape)};
                           });
}

/// Repeats a length-C vector over an NCHW shape.
template <typename T>
Tensor<T> broadcast_channels(const Tensor<T>& v, const Shape& shape) {
  detail::require_rank4(shape, "broadcast_channels");
  const auto n = shape[0], c = shape[1], hw = shape[2] * shape[3];
  if (v.numel() != c) {
    throw DimensionError("broadcast_channels: vector of " + std::to_string(v.numel()) +
                         " values for " + std::to_string(c) + " channels");
  }
  std::vector<T> out(static_cast<std::size_t>(numel_of(shape)));
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      std::fill_n(out.begin() + (b * c + ch) * hw, hw, v[ch]);
    }
  }
  return detail::record<T>("broadcast_channels", {v}, make_result<T>(shape, std::move(out)),
                           [](const Tensor<T>& g, const std::vector<bool>&) {
                             return typename Tape<T>::Grads{channel_sum(g)};
                           });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  return add(x, broadcast_channels(bias, x.shape()));
}

/// Maps [0,1] images to the pre-activation of a tanh head that reproduces
/// them: atanh(clamp(2x-1, -limit, limit)). Gradient is zero where clamped.
/// First-order only.
template <typename T>
Tensor<T> tanh_preimage(const Tensor<T>& x, double limit) {
  const T lim = static_cast<T>(limit);
  auto out = detail::map(x, [lim](T v) {
    const T u = std::clamp(T{2} * v - T{1}, -lim, lim);
    return static_cast<T>(std::atanh(u));
  });
  return detail::record<T>("tanh_preimage", {x}, out,
                           [x, lim](const Tensor<T>& g, const std::vector<bool>&) {
                             detail::require_first_order<T>("tanh_preimage");
                             auto d = detail::map(x, [lim](T v) {
                               const T u = T{2} * v - T{1};
                               return std::abs(u) < lim ? T{2} / (T{1} - u * u) : T{0};
                             });
                             return typename Tape<T>::Grads{mul(g, d)};
                           });
}

}  // namespace pargan
